"""Patch-feature maps and the providers that produce them.

A feature map is the grid of patch tokens that Slot Attention groups and
that the decoder is trained to reproduce. Three providers exist:

* ``precomputed``: tokens extracted elsewhere and stored in the ``DNSR``
  binary format (see :func:`write_features`).
* ``toy-frozen``: a seeded random projection of flattened patch pixels plus
  a sinusoidal grid code. It has no trainable state at all.
* ``trainable-conv``: a small strided CNN trained end to end, which must be
  paired with a separate frozen target provider.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataError, FormatError

MAGIC = b"DNSR"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")

PROVIDERS = ("precomputed", "toy-frozen", "trainable-conv")


@dataclass
class PatchFeatureMap:
    """``N x D_feat`` tokens laid out on a ``rows x cols`` grid (raster order)."""

    tokens: np.ndarray
    grid: tuple[int, int]
    source_tag: str = "precomputed"

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens)
        self.grid = (int(self.grid[0]), int(self.grid[1]))
        if self.tokens.ndim != 2:
            raise DataError(f"tokens must be 2-D, got shape {self.tokens.shape}")
        if self.grid[0] * self.grid[1] != self.tokens.shape[0]:
            raise DataError(
                f"grid {self.grid} does not match {self.tokens.shape[0]} tokens"
            )
        if not np.all(np.isfinite(self.tokens)):
            raise DataError("feature map contains non-finite values")

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.tokens.shape[1]

    def as_grid(self) -> np.ndarray:
        """Tokens reshaped to ``rows x cols x D_feat``."""
        return self.tokens.reshape(*self.grid, -1)


@dataclass
class EncoderConfig:
    provider: str = "toy-frozen"
    patch_size: int = 8
    feature_dim: int = 32
    seed: int = 0
    channels: int = 3
    # multiplier of the sinusoidal grid code; 0 disables it
    grid_scale: float = 1.0
    hidden_channels: int = 32

    def __post_init__(self):
        if self.provider not in PROVIDERS:
            raise ConfigError(f"provider must be one of {PROVIDERS}, got {self.provider!r}")
        if self.patch_size < 1 or self.feature_dim < 1:
            raise ConfigError("patch_size and feature_dim must be positive")

    def check_image(self, height: int, width: int) -> tuple[int, int]:
        if height % self.patch_size or width % self.patch_size:
            raise ConfigError(
                f"image size {height}x{width} is not divisible by patch size {self.patch_size}"
            )
        return height // self.patch_size, width // self.patch_size


def write_features(path, fmap: PatchFeatureMap) -> None:
    """Serialize ``fmap`` as ``DNSR`` v1: header then little-endian float32 tokens."""
    rows, cols = fmap.grid
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, rows, cols, fmap.feature_dim)
    payload = np.ascontiguousarray(fmap.tokens, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def decode_features(buf: bytes, source_tag: str = "precomputed") -> PatchFeatureMap:
    if len(buf) < _HEADER.size:
        raise FormatError(f"header: expected {_HEADER.size} bytes, got {len(buf)}")
    magic, version, rows, cols, dim = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"magic: expected {MAGIC!r}, got {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"version: unsupported value {version}")
    for name, value in (("rows", rows), ("cols", cols), ("D_feat", dim)):
        if value == 0:
            raise FormatError(f"{name}: must be positive")
    expected = rows * cols * dim * 4
    payload = buf[_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(
            f"payload: header declares {expected} bytes ({rows}x{cols}x{dim} float32), "
            f"found {len(payload)}"
        )
    tokens = np.frombuffer(payload, dtype="<f4").reshape(rows * cols, dim).astype(np.float32)
    return PatchFeatureMap(tokens, (rows, cols), source_tag)


def load_precomputed_features(sample_path) -> PatchFeatureMap:
    """Read a ``DNSR`` feature file written by :func:`write_features` or an external extractor."""
    return decode_features(Path(sample_path).read_bytes())


def sinusoidal_grid_code(rows: int, cols: int, dim: int) -> np.ndarray:
    """Deterministic 2-D sine/cosine code, ``rows*cols x dim``.

    Half the channels encode the row coordinate, half the column coordinate,
    each with geometrically spaced frequencies.
    """
    half = dim // 2
    codes = []
    for coord, size, width in ((np.arange(rows), rows, half), (np.arange(cols), cols, dim - half)):
        pos = (coord + 0.5) / size
        n_freq = (width + 1) // 2
        freqs = np.pi * 2.0 ** np.arange(n_freq)
        angles = pos[:, None] * freqs[None, :]
        code = np.empty((size, 2 * n_freq))
        code[:, 0::2] = np.sin(angles)
        code[:, 1::2] = np.cos(angles)
        codes.append(code[:, :width])
    row_code = np.repeat(codes[0], cols, axis=0)
    col_code = np.tile(codes[1], (rows, 1))
    return np.concatenate([row_code, col_code], axis=1)


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """``H x W x C`` image to ``N x (p*p*C)`` flattened patches in raster order."""
    h, w, c = image.shape
    rows, cols = h // patch_size, w // patch_size
    patches = image.reshape(rows, patch_size, cols, patch_size, c).transpose(0, 2, 1, 3, 4)
    return patches.reshape(rows * cols, patch_size * patch_size * c)


class ToyFrozenEncoder:
    """Fixed random linear patch embedding; holds numpy arrays only, never torch parameters."""

    def __init__(self, cfg: EncoderConfig):
        if cfg.provider != "toy-frozen":
            raise ConfigError(f"ToyFrozenEncoder needs provider 'toy-frozen', got {cfg.provider!r}")
        self.cfg = cfg
        in_dim = cfg.patch_size * cfg.patch_size * cfg.channels
        rng = np.random.default_rng(cfg.seed)
        self.projection = rng.standard_normal((in_dim, cfg.feature_dim)) / np.sqrt(in_dim)
        self.projection.setflags(write=False)

    def grid_code(self, rows: int, cols: int) -> np.ndarray:
        return self.cfg.grid_scale * sinusoidal_grid_code(rows, cols, self.cfg.feature_dim)

    def __call__(self, image: np.ndarray) -> PatchFeatureMap:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim == 2:
            image = image[:, :, None]
        if image.shape[2] != self.cfg.channels:
            raise ConfigError(f"expected {self.cfg.channels} channels, got {image.shape[2]}")
        rows, cols = self.cfg.check_image(*image.shape[:2])
        tokens = patchify(image, self.cfg.patch_size) @ self.projection
        tokens = tokens + self.grid_code(rows, cols)
        return PatchFeatureMap(tokens.astype(np.float32), (rows, cols), "toy-frozen")

    def state_bytes(self) -> bytes:
        return self.projection.tobytes()


def toy_frozen_encoder(image: np.ndarray, cfg: EncoderConfig, rng_seed: int | None = None) -> PatchFeatureMap:
    if rng_seed is not None and rng_seed != cfg.seed:
        cfg = EncoderConfig(**{**cfg.__dict__, "seed": rng_seed})
    return ToyFrozenEncoder(cfg)(image)


class TrainableConvEncoder(nn.Module):
    """Strided CNN emitting one token per ``patch_size`` cell.

    ``target_cfg`` names the frozen provider whose features form the loss
    target; sharing the trainable encoder as its own target lets the loss be
    minimised trivially, so that combination is rejected.
    """

    def __init__(self, cfg: EncoderConfig, target_cfg: EncoderConfig | None):
        super().__init__()
        if cfg.provider != "trainable-conv":
            raise ConfigError(f"TrainableConvEncoder needs provider 'trainable-conv', got {cfg.provider!r}")
        if target_cfg is None:
            raise ConfigError("trainable-conv encoder requires a separate frozen target provider")
        if target_cfg.provider == "trainable-conv" or target_cfg is cfg:
            raise ConfigError("trainable-conv encoder cannot also be the reconstruction target provider")
        self.cfg = cfg
        hidden = cfg.hidden_channels
        self.net = nn.Sequential(
            nn.Conv2d(cfg.channels, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, hidden, cfg.patch_size, stride=cfg.patch_size),
            nn.ReLU(),
            nn.Conv2d(hidden, cfg.feature_dim, 1),
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``B x C x H x W`` to ``B x N x D_feat``."""
        self.cfg.check_image(images.shape[-2], images.shape[-1])
        out = self.net(images)
        return out.flatten(2).transpose(1, 2)


def trainable_conv_encoder(image: np.ndarray, encoder: TrainableConvEncoder) -> PatchFeatureMap:
    p = next(encoder.parameters())
    x = torch.as_tensor(np.asarray(image), dtype=p.dtype)
    if x.ndim == 2:
        x = x[:, :, None]
    rows, cols = encoder.cfg.check_image(x.shape[0], x.shape[1])
    with torch.no_grad():
        tokens = encoder(x.permute(2, 0, 1)[None])[0]
    return PatchFeatureMap(tokens.numpy(), (rows, cols), "trainable-conv")


def _catmull_rom(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    near = ((a + 2) * t - (a + 3)) * t * t + 1
    far = ((a * t - 5 * a) * t + 8 * a) * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def bicubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``n_out x n_in`` Catmull-Rom resampling weights, half-pixel centers, clamped edges."""
    scale = n_out / n_in
    weights = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = (i + 0.5) / scale - 0.5
        base = int(np.floor(src))
        for tap in range(base - 1, base + 3):
            weights[i, min(max(tap, 0), n_in - 1)] += _catmull_rom(src - tap)
    return weights


def rescale_target_map(features: PatchFeatureMap, factor: float) -> PatchFeatureMap:
    """Shrink the token grid by ``factor`` with bicubic interpolation per channel."""
    if not 0 < factor <= 1:
        raise ValueError(f"factor must lie in (0, 1], got {factor}")
    if factor == 1:
        return features
    rows, cols = features.grid
    new_rows, new_cols = int(round(rows * factor)), int(round(cols * factor))
    if new_rows < 1 or new_cols < 1:
        raise ValueError(f"factor {factor} shrinks grid {features.grid} below one cell")
    grid = features.as_grid().astype(np.float64)
    wr, wc = bicubic_matrix(rows, new_rows), bicubic_matrix(cols, new_cols)
    out = np.einsum("ir,rcd,jc->ijd", wr, grid, wc)
    tokens = out.reshape(new_rows * new_cols, -1).astype(features.tokens.dtype)
    return PatchFeatureMap(tokens, (new_rows, new_cols), features.source_tag)
