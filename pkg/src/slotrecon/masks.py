"""Turning model outputs into evaluation masks, boxes, and the block-pattern baseline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from .errors import ConfigError

MASK_SOURCES = ("mlp-alpha", "decoder-attention", "slot-attention")

# which mask sources each decoder can provide
_AVAILABLE = {
    "mlp": ("mlp-alpha", "slot-attention"),
    "pixel": ("mlp-alpha", "slot-attention"),
    "transformer": ("decoder-attention", "slot-attention"),
}


class BoundingBox(NamedTuple):
    """Half-open pixel box ``[xmin, xmax) x [ymin, ymax)``."""

    xmin: int
    ymin: int
    xmax: int
    ymax: int

    @property
    def area(self) -> int:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)


@dataclass
class ModelOutput:
    """Everything one forward pass exposes for mask extraction, batch axis first."""

    decoder: str
    reconstruction: torch.Tensor
    decoder_masks: torch.Tensor
    slot_attention: torch.Tensor
    slots: torch.Tensor
    feature_grid: tuple[int, int]


def default_mask_source(decoder: str) -> str:
    return "decoder-attention" if decoder == "transformer" else "mlp-alpha"


def available_sources(decoder: str) -> tuple[str, ...]:
    return _AVAILABLE[decoder]


def extract_masks(output: ModelOutput, source: str) -> np.ndarray:
    """Soft masks ``B x K x h x w`` from the requested source.

    ``mlp-alpha`` masks come at the decoder's own resolution (the token grid
    for the MLP decoder, pixels for the pixel decoder); the other sources
    live on the feature grid.
    """
    valid = available_sources(output.decoder)
    if source not in valid:
        raise ConfigError(
            f"mask source {source!r} is unavailable for the {output.decoder} decoder; valid: {', '.join(valid)}"
        )
    if source == "slot-attention":
        masks = output.slot_attention
        grid = output.feature_grid
    else:
        masks = output.decoder_masks
        if masks.ndim == 4:
            return masks.detach().cpu().numpy()
        grid = _grid_for(masks.shape[-1], output.feature_grid)
    masks = masks.detach().cpu().numpy()
    return masks.reshape(*masks.shape[:2], *grid)


def _grid_for(n_tokens: int, feature_grid: tuple[int, int]) -> tuple[int, int]:
    if n_tokens == feature_grid[0] * feature_grid[1]:
        return feature_grid
    side = int(round(np.sqrt(n_tokens)))
    if side * side != n_tokens:
        raise ConfigError(f"cannot lay out {n_tokens} mask tokens on a grid")
    return side, side


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``n_out x n_in`` linear interpolation weights, half-pixel centers, clamped edges."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    weights = np.zeros((n_out, n_in))
    np.add.at(weights, (np.arange(n_out), lo), 1 - frac)
    np.add.at(weights, (np.arange(n_out), hi), frac)
    return weights


def resize_masks(masks: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinearly resize the trailing two axes of ``masks`` to ``height x width``."""
    if height < 1 or width < 1:
        raise ValueError(f"target size must be positive, got {height}x{width}")
    h, w = masks.shape[-2:]
    if (h, w) == (height, width):
        return masks.copy()
    wr, wc = bilinear_matrix(h, height), bilinear_matrix(w, width)
    return np.einsum("ih,...hw,jw->...ij", wr, masks, wc)


def hard_masks(masks: np.ndarray) -> np.ndarray:
    """Argmax over the slot axis (axis -3); ties resolve to the lowest slot index."""
    return np.argmax(masks, axis=-3)


def boxes_from_masks(labels: np.ndarray) -> list[tuple[int, BoundingBox]]:
    """Tightest half-open box around every label that owns at least one pixel."""
    boxes = []
    for label in np.unique(labels):
        ys, xs = np.nonzero(labels == label)
        boxes.append((int(label), BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)))
    return boxes


def block_columns(num_masks: int) -> int:
    if num_masks < 9:
        return 2
    if num_masks <= 15:
        return 3
    return 4


def _split_sizes(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + 1 if i < extra else base for i in range(parts)]


def block_pattern(num_masks: int, height: int, width: int) -> np.ndarray:
    """Geometric partition into ``num_masks`` rectangular blocks, labelled column-major.

    Left columns receive the extra block when the count does not divide
    evenly; pixel remainders likewise go to the leftmost columns and topmost
    blocks.
    """
    if num_masks < 1:
        raise ValueError(f"num_masks must be >= 1, got {num_masks}")
    n_cols = min(block_columns(num_masks), num_masks)
    labels = np.zeros((height, width), dtype=np.int64)
    label = 0
    x = 0
    for col_width, n_blocks in zip(_split_sizes(width, n_cols), _split_sizes(num_masks, n_cols)):
        y = 0
        for block_height in _split_sizes(height, n_blocks):
            labels[y:y + block_height, x:x + col_width] = label
            label += 1
            y += block_height
        x += col_width
    return labels


def check_simplex(masks: np.ndarray, atol: float = 1e-6) -> bool:
    """True when every position's values over the slot axis are >= 0 and sum to 1."""
    return bool(np.all(masks >= -atol) and np.allclose(masks.sum(axis=-3), 1.0, atol=atol, rtol=0))
