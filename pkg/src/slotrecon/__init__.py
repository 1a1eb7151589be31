"""Object-centric scene decomposition by reconstructing frozen patch features."""

from .data import SynthConfig, generate_synthetic_dataset, load_dataset
from .decoding import MLPDecoder, PixelBroadcastDecoder, TransformerDecoder
from .errors import ConfigError, DataError, FormatError, NumericalError, SlotReconError
from .evaluation import evaluate, evaluate_block_pattern
from .features import EncoderConfig, PatchFeatureMap, TrainableConvEncoder, ToyFrozenEncoder
from .grouping import SlotAttention
from .masks import block_pattern
from .metrics import MetricsReport, adjusted_rand_index, hungarian_match, kmeans
from .training import TrainConfig, TrainState, load_checkpoint, lr_schedule, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "EncoderConfig", "FormatError", "MLPDecoder", "MetricsReport",
    "NumericalError", "PatchFeatureMap", "PixelBroadcastDecoder", "SlotAttention", "SlotReconError",
    "SynthConfig", "ToyFrozenEncoder", "TrainConfig", "TrainState", "TrainableConvEncoder",
    "TransformerDecoder", "adjusted_rand_index", "block_pattern", "evaluate", "evaluate_block_pattern",
    "generate_synthetic_dataset", "hungarian_match", "kmeans", "load_checkpoint", "load_dataset",
    "lr_schedule", "save_checkpoint", "train",
]
