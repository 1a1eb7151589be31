"""Training of Slot Attention and a decoder against frozen feature targets."""

from __future__ import annotations

import base64
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .decoding import MLPDecoder, PixelBroadcastDecoder, TransformerDecoder, interpolate_images
from .errors import ConfigError, FormatError, NumericalError
from .features import (
    EncoderConfig,
    PatchFeatureMap,
    TrainableConvEncoder,
    rescale_target_map,
    sinusoidal_grid_code,
)
from .grouping import SlotAttention
from .masks import ModelOutput

log = logging.getLogger(__name__)

DECODERS = ("mlp", "transformer", "pixel")
ENCODERS = ("precomputed", "trainable-conv")
CHECKPOINT_VERSION = 1
_BIN_MAGIC = b"DNSC"
_BIN_HEADER = struct.Struct("<4sI")


@dataclass
class TrainConfig:
    steps: int = 500_000
    batch_size: int = 64
    peak_lr: float = 4e-4
    warmup_steps: int = 10_000
    decay_half_life: int = 100_000
    grad_clip_norm: float = 1.0
    n_slots: int = 7
    n_iters: int = 3
    decoder: str = "mlp"
    target_scale: float = 1.0
    seed: int = 0
    slot_dim: int = 128
    mlp_hidden: int = 1024
    tf_layers: int = 4
    tf_heads: int = 8
    pixel_size: int = 64
    pixel_hidden: int = 64
    encoder: str = "precomputed"
    checkpoint_every: int = 0
    double_precision: bool = False
    # amplitude of the sinusoidal grid code the precomputed provider adds to
    # stored features (inputs and targets alike); 0 uses the files verbatim
    grid_code_scale: float = 0.0

    def __post_init__(self):
        for name in ("steps", "warmup_steps", "decay_half_life"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("batch_size", "n_slots", "n_iters", "slot_dim", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.peak_lr < 0:
            raise ConfigError("peak_lr must be >= 0")
        if self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be > 0")
        if self.decoder not in DECODERS:
            raise ConfigError(f"decoder must be one of {DECODERS}, got {self.decoder!r}")
        if self.encoder not in ENCODERS:
            raise ConfigError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if not 0 < self.target_scale <= 1:
            raise ConfigError(f"target_scale must lie in (0, 1], got {self.target_scale}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training options: {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class DataSpec:
    """Shapes of the data a model is built for."""

    feature_dim: int
    grid: tuple[int, int]
    image_size: tuple[int, int] = (64, 64)
    channels: int = 3
    patch_size: int = 8

    def target_grid(self, scale: float) -> tuple[int, int]:
        if scale == 1:
            return tuple(self.grid)
        return tuple(int(round(g * scale)) for g in self.grid)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up multiplied by exponential decay with the configured half-life."""
    warm = 1.0 if cfg.warmup_steps == 0 else min(1.0, step / cfg.warmup_steps)
    decay = 1.0 if cfg.decay_half_life == 0 else 2.0 ** (-step / cfg.decay_half_life)
    return cfg.peak_lr * warm * decay


def reconstruction_loss(y: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all elements."""
    if y.shape != h.shape:
        raise ValueError(f"reconstruction shape {tuple(y.shape)} != target shape {tuple(h.shape)}")
    return ((y - h) ** 2).mean()


class ObjectCentricModel(nn.Module):
    """Slot Attention grouping followed by one of the decoders."""

    def __init__(self, cfg: TrainConfig, spec: DataSpec):
        super().__init__()
        self.cfg, self.spec = cfg, spec
        self.target_grid = spec.target_grid(cfg.target_scale)
        n_target = self.target_grid[0] * self.target_grid[1]
        self.encoder = None
        if cfg.encoder == "trainable-conv":
            enc_cfg = EncoderConfig("trainable-conv", spec.patch_size, spec.feature_dim, cfg.seed, spec.channels)
            self.encoder = TrainableConvEncoder(enc_cfg, EncoderConfig("precomputed", spec.patch_size, spec.feature_dim))
        self.grouping = SlotAttention(spec.feature_dim, cfg.slot_dim, cfg.n_iters)
        if cfg.decoder == "mlp":
            self.decoder = MLPDecoder(cfg.slot_dim, spec.feature_dim, n_target, cfg.mlp_hidden)
        elif cfg.decoder == "transformer":
            self.decoder = TransformerDecoder(cfg.slot_dim, spec.feature_dim, n_target, cfg.tf_layers, cfg.tf_heads)
        else:
            self.decoder = PixelBroadcastDecoder(cfg.slot_dim, (cfg.pixel_size, cfg.pixel_size),
                                                 spec.channels, cfg.pixel_hidden)

    def forward(self, features: torch.Tensor, targets: torch.Tensor,
                generator: torch.Generator | None = None, images: torch.Tensor | None = None,
                n_slots: int | None = None):
        """Returns ``(loss, ModelOutput)``.

        ``targets`` are the (possibly rescaled) feature targets for feature
        decoders, or ``B x C x H x W`` images for the pixel decoder.
        """
        inputs = features if self.encoder is None else self.encoder(images)
        slots, attn = self.grouping(inputs, n_slots or self.cfg.n_slots, generator)
        if self.cfg.decoder == "transformer":
            recon, masks = self.decoder(slots, targets)
        else:
            recon, masks = self.decoder(slots)
        loss = reconstruction_loss(recon, targets)
        return loss, ModelOutput(self.cfg.decoder, recon, masks, attn, slots, tuple(self.spec.grid))


def prepare_targets(cfg: TrainConfig, spec: DataSpec, features: np.ndarray,
                    images: np.ndarray | None = None) -> np.ndarray:
    """Reconstruction targets for every sample: rescaled features or downsampled images."""
    if cfg.decoder == "pixel":
        if images is None:
            raise ConfigError("the pixel decoder needs a dataset with rendered images")
        t = torch.as_tensor(images).permute(0, 3, 1, 2)
        return interpolate_images(t, cfg.pixel_size).numpy()
    if cfg.target_scale == 1:
        return features
    return np.stack([
        rescale_target_map(PatchFeatureMap(f, spec.grid), cfg.target_scale).tokens for f in features
    ])


def step_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed((seed * 1_000_003 + step) % (2 ** 63))


def batch_indices(seed: int, step: int, batch_size: int, n_samples: int) -> np.ndarray:
    """Sample indices for ``step``: consecutive slices of per-epoch seeded permutations."""
    positions = step * batch_size + np.arange(batch_size)
    epochs = positions // n_samples
    out = np.empty(batch_size, dtype=np.int64)
    for epoch in np.unique(epochs):
        perm = np.random.default_rng([seed, int(epoch)]).permutation(n_samples)
        sel = epochs == epoch
        out[sel] = perm[positions[sel] % n_samples]
    return out


def clip_gradients(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the original norm."""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = torch.sqrt(sum((g.double() ** 2).sum() for g in grads)).item()
    if not math.isfinite(total):
        raise NumericalError(f"gradient norm is {total}")
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g.mul_(scale)
    return total


@dataclass
class TrainState:
    cfg: TrainConfig
    spec: DataSpec
    model: ObjectCentricModel
    optimizer: torch.optim.Optimizer
    step: int = 0
    loss_trace: list[float] = field(default_factory=list)

    @classmethod
    def create(cls, cfg: TrainConfig, spec: DataSpec) -> "TrainState":
        torch.manual_seed(cfg.seed)
        model = ObjectCentricModel(cfg, spec)
        if cfg.double_precision:
            model = model.double()
        optimizer = torch.optim.Adam(model.parameters(), lr=0.0, betas=(0.9, 0.999), eps=1e-8)
        return cls(cfg, spec, model, optimizer)

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.model.parameters() if p.requires_grad]


def train_step(state: TrainState, features: torch.Tensor, targets: torch.Tensor,
               images: torch.Tensor | None = None, generator: torch.Generator | None = None) -> dict:
    """One optimisation step on a batch; mutates ``state`` and returns loss, grad norm and lr."""
    if features.shape[0] == 0:
        raise ValueError("empty batch")
    lr = lr_schedule(state.step, state.cfg)
    if generator is None:
        generator = step_generator(state.cfg.seed, state.step)
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    loss, _ = state.model(features, targets, generator, images)
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss.item()} at step {state.step}")
    loss.backward()
    grad_norm = clip_gradients(state.trainable_parameters(), state.cfg.grad_clip_norm)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    state.step += 1
    value = loss.item()
    state.loss_trace.append(value)
    return {"step": state.step, "lr": lr, "loss": value, "grad_norm": grad_norm}


@dataclass
class TrainingData:
    """In-memory arrays for training: inputs, targets and optional images (NCHW).

    ``stored`` holds the features exactly as read from disk, before any
    provider-side grid code.
    """

    features: np.ndarray
    targets: np.ndarray
    images: np.ndarray | None = None
    stored: np.ndarray | None = None


def load_training_data(cfg: TrainConfig, dataset) -> tuple[DataSpec, TrainingData]:
    """Stack a :class:`~slotrecon.data.Dataset` split into arrays after checking it fits ``cfg``."""
    m = dataset.manifest
    patch = m.image_size[0] // m.grid[0]
    spec = DataSpec(m.feature_dim, tuple(m.grid), tuple(m.image_size), 3, patch)
    needs_images = cfg.decoder == "pixel" or cfg.encoder == "trainable-conv"
    if needs_images and not m.has_images:
        raise ConfigError(f"decoder {cfg.decoder!r} / encoder {cfg.encoder!r} needs rendered images")
    if cfg.target_scale != 1 and min(spec.target_grid(cfg.target_scale)) < 1:
        raise ConfigError(f"target_scale {cfg.target_scale} leaves an empty grid")
    if cfg.decoder == "transformer" and spec.feature_dim % cfg.tf_heads:
        raise ConfigError(f"feature_dim {spec.feature_dim} is not divisible by {cfg.tf_heads} heads")
    stored = dataset.stacked_features()
    features = stored
    if cfg.grid_code_scale:
        code = sinusoidal_grid_code(*spec.grid, spec.feature_dim) * cfg.grid_code_scale
        features = (stored + code).astype(np.float32)
    images = dataset.stacked_images() if needs_images else None
    targets = prepare_targets(cfg, spec, features, images)
    images_nchw = None if images is None else np.ascontiguousarray(images.transpose(0, 3, 1, 2))
    return spec, TrainingData(features, targets, images_nchw, stored)


def train(cfg: TrainConfig, dataset=None, *, data: tuple[DataSpec, TrainingData] | None = None,
          state: TrainState | None = None, checkpoint_dir=None,
          on_step: Callable[[dict], None] | None = None) -> TrainState:
    """Run ``cfg.steps`` steps in total (resuming from ``state.step`` if given).

    Batches follow the seeded order of :func:`batch_indices`, so an
    interrupted and resumed run sees exactly the batches of an uninterrupted
    one.
    """
    spec, arrays = data if data is not None else load_training_data(cfg, dataset)
    if state is None:
        state = TrainState.create(cfg, spec)
    elif asdict(state.spec) != asdict(spec):
        raise ConfigError(f"checkpoint was built for {state.spec}, dataset provides {spec}")
    dtype = next(state.model.parameters()).dtype
    n = len(arrays.features)
    while state.step < cfg.steps:
        idx = batch_indices(cfg.seed, state.step, cfg.batch_size, n)
        feats = torch.as_tensor(arrays.features[idx], dtype=dtype)
        targets = torch.as_tensor(arrays.targets[idx], dtype=dtype)
        images = None if arrays.images is None else torch.as_tensor(arrays.images[idx], dtype=dtype)
        stats = train_step(state, feats, targets, images)
        if on_step is not None:
            on_step(stats)
        if checkpoint_dir and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(state, checkpoint_dir)
    if checkpoint_dir:
        save_checkpoint(state, checkpoint_dir)
    return state


# ---------------------------------------------------------------------------
# checkpoints


def _write_tensors(path: Path, tensors: dict[str, torch.Tensor]) -> list[dict]:
    manifest = []
    offset = _BIN_HEADER.size
    chunks = [_BIN_HEADER.pack(_BIN_MAGIC, CHECKPOINT_VERSION)]
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        dtype = arr.dtype.newbyteorder("<")
        raw = arr.astype(dtype, copy=False).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": dtype.str, "offset": offset,
                         "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    path.write_bytes(b"".join(chunks))
    return manifest


def _read_tensors(path: Path, manifest: list[dict]) -> dict[str, torch.Tensor]:
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"{path.name} is missing") from None
    if len(buf) < _BIN_HEADER.size:
        raise FormatError(f"{path.name}: truncated header")
    magic, version = _BIN_HEADER.unpack_from(buf)
    if magic != _BIN_MAGIC:
        raise FormatError(f"{path.name}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path.name}: checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    out = {}
    for entry in manifest:
        end = entry["offset"] + entry["nbytes"]
        if end > len(buf):
            raise FormatError(f"{path.name}: tensor {entry['name']} extends past end of file (partial write?)")
        arr = np.frombuffer(buf, dtype=np.dtype(entry["dtype"]), count=int(np.prod(entry["shape"], dtype=np.int64)),
                            offset=entry["offset"]).reshape(entry["shape"])
        out[entry["name"]] = torch.from_numpy(arr.copy())
    return out


def save_checkpoint(state: TrainState, path) -> None:
    """Write the checkpoint directory (config, parameters, optimizer and rng state)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    config = {"version": CHECKPOINT_VERSION, "train": asdict(state.cfg), "data": asdict(state.spec),
              "step": state.step}
    (path / "config.json").write_text(json.dumps(config, indent=1, sort_keys=True))

    params = _write_tensors(path / "params.bin", state.model.state_dict())
    (path / "params.json").write_text(json.dumps({"version": CHECKPOINT_VERSION, "tensors": params}, indent=1))

    opt = state.optimizer.state_dict()
    tensors = {f"{idx}.{key}": value for idx, st in opt["state"].items() for key, value in st.items()}
    manifest = _write_tensors(path / "optim.bin", tensors)
    groups = [{k: v for k, v in g.items()} for g in opt["param_groups"]]
    (path / "optim.json").write_text(json.dumps({"version": CHECKPOINT_VERSION, "tensors": manifest,
                                                 "param_groups": groups}, indent=1))

    gen = step_generator(state.cfg.seed, state.step)
    rng = {"seed": state.cfg.seed, "step": state.step,
           "torch_generator": base64.b64encode(gen.get_state().numpy().tobytes()).decode(),
           "loss_trace": state.loss_trace}
    (path / "rng.json").write_text(json.dumps(rng))


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise FormatError(f"{path.name} is missing") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path.name} is not valid JSON: {exc}") from None


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    config = _read_json(path / "config.json")
    if config.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"checkpoint version {config.get('version')} is not supported (expected {CHECKPOINT_VERSION})")
    cfg = TrainConfig.from_dict(config["train"])
    data = config["data"]
    spec = DataSpec(data["feature_dim"], tuple(data["grid"]), tuple(data["image_size"]),
                    data["channels"], data["patch_size"])
    state = TrainState.create(cfg, spec)

    pman = _read_json(path / "params.json")
    params = _read_tensors(path / "params.bin", pman["tensors"])
    state.model.load_state_dict(params, strict=True)

    oman = _read_json(path / "optim.json")
    flat = _read_tensors(path / "optim.bin", oman["tensors"])
    opt_state: dict[int, dict] = {}
    for name, value in flat.items():
        idx, key = name.split(".", 1)
        opt_state.setdefault(int(idx), {})[key] = value
    state.optimizer.load_state_dict({"state": opt_state, "param_groups": oman["param_groups"]})

    rng = _read_json(path / "rng.json")
    state.step = int(config["step"])
    state.loss_trace = list(rng.get("loss_trace", []))
    if rng.get("step") != state.step:
        raise FormatError("rng.json step does not match config.json")
    return state


def parameter_bytes(module: nn.Module) -> bytes:
    """Serialized parameters and buffers, for bitwise before/after comparisons."""
    return b"".join(t.detach().cpu().numpy().tobytes() for t in module.state_dict().values())
