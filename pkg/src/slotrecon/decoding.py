"""Decoders mapping slots back to a reconstruction plus per-slot soft masks.

Every decoder returns ``(reconstruction, masks)`` where ``masks`` has the
slot axis at dim 1 and sums to one over it at every position.
"""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

from ._ops import slot_softmax, symmetric_sum
from .errors import ConfigError


class MLPDecoder(nn.Module):
    """Spatial-broadcast MLP decoder over patch tokens.

    Each slot is copied to all ``N`` positions, a learned positional table is
    added, and a shared MLP emits ``D_feat`` reconstruction channels plus one
    alpha logit. Alphas are softmaxed across slots to mix the per-slot
    reconstructions.
    """

    def __init__(self, slot_dim: int, feature_dim: int, n_tokens: int,
                 hidden: int = 1024, n_layers: int = 4):
        super().__init__()
        self.slot_dim, self.feature_dim, self.n_tokens = slot_dim, feature_dim, n_tokens
        self.pos_embed = nn.Parameter(torch.randn(n_tokens, slot_dim) * 0.02)
        layers: list[nn.Module] = []
        width = slot_dim
        for _ in range(n_layers - 1):
            layers += [nn.Linear(width, hidden), nn.ReLU()]
            width = hidden
        layers.append(nn.Linear(width, feature_dim + 1))
        self.mlp = nn.Sequential(*layers)

    def forward(self, slots: torch.Tensor):
        if slots.shape[-1] != self.slot_dim:
            raise ValueError(f"slot dim {slots.shape[-1]} != decoder slot dim {self.slot_dim}")
        tokens = slots[:, :, None, :] + self.pos_embed  # B x K x N x D_slots
        out = self.mlp(tokens)
        per_slot, alpha = out[..., :-1], out[..., -1]
        masks = slot_softmax(alpha, dim=1)
        recon = symmetric_sum(per_slot * masks[..., None], dim=1)
        self.last_alpha = alpha
        self.last_per_slot = per_slot
        return recon, masks


class Attention(nn.Module):
    """Multi-head attention that also returns head-averaged weights.

    ``over_slots`` switches the key axis reductions to the order-free
    versions used whenever keys are slots.
    """

    def __init__(self, dim: int, n_heads: int, kv_dim: int | None = None):
        super().__init__()
        if dim % n_heads:
            raise ConfigError(f"feature dim {dim} is not divisible by {n_heads} heads")
        kv_dim = kv_dim or dim
        self.n_heads = n_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.out = nn.Linear(dim, dim)

    def _split(self, x):
        b, n, d = x.shape
        return x.view(b, n, self.n_heads, d // self.n_heads).transpose(1, 2)

    def forward(self, x, context, causal: bool = False, over_slots: bool = False):
        q, k, v = self._split(self.q(x)), self._split(self.k(context)), self._split(self.v(context))
        logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if causal:
            n = x.shape[1]
            future = torch.ones(n, n, dtype=torch.bool).triu(1)
            logits = logits.masked_fill(future, float("-inf"))
        if over_slots:
            attn = slot_softmax(logits, dim=-1)
            mixed = symmetric_sum(attn[..., None] * v[:, :, None, :, :], dim=-2)
        else:
            attn = logits.softmax(dim=-1)
            mixed = attn @ v
        b, h, n, dh = mixed.shape
        out = self.out(mixed.transpose(1, 2).reshape(b, n, h * dh))
        return out, attn.mean(dim=1)


class DecoderBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int, mlp_hidden: int):
        super().__init__()
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, n_heads)
        self.norm_cross = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, n_heads)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_hidden), nn.ReLU(), nn.Linear(mlp_hidden, dim))

    def forward(self, x, slots):
        h = self.norm_self(x)
        x = x + self.self_attn(h, h, causal=True)[0]
        update, cross = self.cross_attn(self.norm_cross(x), slots, over_slots=True)
        x = x + update
        x = x + self.mlp(self.norm_mlp(x))
        return x, cross


class TransformerDecoder(nn.Module):
    """Autoregressive pre-norm Transformer decoder reconstructing features in raster order.

    Teacher forcing: the input sequence is the target shifted right by one
    with a learned start token in front. No positional encoding is added;
    the target features carry position information themselves.
    """

    def __init__(self, slot_dim: int, feature_dim: int, n_tokens: int,
                 n_layers: int = 4, n_heads: int = 8, mlp_hidden: int | None = None):
        super().__init__()
        self.slot_dim, self.feature_dim, self.n_tokens = slot_dim, feature_dim, n_tokens
        self.bos = nn.Parameter(torch.randn(feature_dim) * 0.02)
        self.input_proj = nn.Sequential(nn.Linear(feature_dim, feature_dim), nn.LayerNorm(feature_dim))
        self.slot_proj = nn.Sequential(nn.Linear(slot_dim, feature_dim), nn.LayerNorm(feature_dim))
        mlp_hidden = mlp_hidden or 4 * feature_dim
        self.blocks = nn.ModuleList(
            DecoderBlock(feature_dim, n_heads, mlp_hidden) for _ in range(n_layers)
        )

    def forward(self, slots: torch.Tensor, targets: torch.Tensor):
        if targets.shape[1] != self.n_tokens:
            raise ValueError(f"targets have {targets.shape[1]} tokens, decoder expects {self.n_tokens}")
        if slots.shape[-1] != self.slot_dim:
            raise ValueError(f"slot dim {slots.shape[-1]} != decoder slot dim {self.slot_dim}")
        bos = self.bos.expand(targets.shape[0], 1, -1)
        x = self.input_proj(torch.cat([bos, targets[:, :-1]], dim=1))
        ctx = self.slot_proj(slots)
        cross = None
        for block in self.blocks:
            x, cross = block(x, ctx)
        return x, cross.transpose(1, 2)


class PixelBroadcastDecoder(nn.Module):
    """Spatial-broadcast CNN decoder for the image-reconstruction baseline.

    Slots are tiled onto a ``start x start`` grid with a learned positional
    table, then upsampled by stride-2 transposed 5x5 convolutions to the
    output size; a final stride-1 layer emits ``channels`` colour values and
    one alpha logit per pixel.
    """

    def __init__(self, slot_dim: int, out_size: tuple[int, int], channels: int = 3,
                 hidden: int = 64, start: int = 8, kernel: int = 5):
        super().__init__()
        h, w = out_size
        if h != w or h % start or (h // start) & (h // start - 1):
            raise ConfigError(
                f"output size {h}x{w} is not reachable from a {start}x{start} grid by stride-2 upsampling"
            )
        self.slot_dim, self.out_size, self.channels, self.start = slot_dim, (h, w), channels, start
        n_up = int(math.log2(h // start))
        pad = kernel // 2
        self.pos_embed = nn.Parameter(torch.randn(slot_dim, start, start) * 0.02)
        layers: list[nn.Module] = []
        width = slot_dim
        for _ in range(n_up):
            layers += [nn.ConvTranspose2d(width, hidden, kernel, stride=2, padding=pad, output_padding=1),
                       nn.ReLU()]
            width = hidden
        layers.append(nn.ConvTranspose2d(width, channels + 1, kernel, stride=1, padding=pad))
        self.net = nn.Sequential(*layers)

    def forward(self, slots: torch.Tensor):
        b, k, d = slots.shape
        if d != self.slot_dim:
            raise ValueError(f"slot dim {d} != decoder slot dim {self.slot_dim}")
        grid = slots.reshape(b * k, d, 1, 1) + self.pos_embed
        out = self.net(grid).view(b, k, self.channels + 1, *self.out_size)
        per_slot, alpha = out[:, :, :-1], out[:, :, -1]
        masks = slot_softmax(alpha, dim=1)
        recon = symmetric_sum(per_slot * masks[:, :, None], dim=1)
        self.last_alpha = alpha
        return recon, masks


def decode_mlp(slots: torch.Tensor, decoder: MLPDecoder):
    """``K x D_slots`` slots to (``N x D_feat`` reconstruction, ``K x rows x cols``-ready masks)."""
    recon, masks = decoder(slots[None])
    return recon[0], masks[0]


def decode_transformer(slots: torch.Tensor, targets: torch.Tensor, decoder: TransformerDecoder):
    recon, masks = decoder(slots[None], targets[None])
    return recon[0], masks[0]


def decode_pixels_broadcast(slots: torch.Tensor, decoder: PixelBroadcastDecoder):
    recon, masks = decoder(slots[None])
    return recon[0], masks[0]


def interpolate_images(images: torch.Tensor, size: int) -> torch.Tensor:
    """Area-downsample ``B x C x H x W`` image targets to ``size x size``."""
    if images.shape[-1] == size:
        return images
    return F.adaptive_avg_pool2d(images, size)
