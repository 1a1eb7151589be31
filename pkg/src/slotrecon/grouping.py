"""Slot Attention grouping of patch features into ``K`` slots."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from ._ops import slot_softmax
from .features import PatchFeatureMap


class SlotAttention(nn.Module):
    """Iterative competitive attention from ``K`` slots over ``N`` input tokens.

    Inputs pass once through layer norm, a one-hidden-layer MLP (hidden size
    ``feature_dim``) and a second layer norm. Each iteration then normalises
    the slots, lets them compete for tokens through a softmax over the slot
    axis, aggregates values with weights renormalised over tokens, and
    updates the slots with a GRU cell followed by a residual MLP.
    """

    def __init__(self, feature_dim: int, slot_dim: int = 128, n_iters: int = 3,
                 mlp_hidden: int | None = None, eps: float = 1e-8):
        super().__init__()
        self.feature_dim = feature_dim
        self.slot_dim = slot_dim
        self.n_iters = n_iters
        self.eps = eps

        self.norm_input = nn.LayerNorm(feature_dim)
        self.input_mlp = nn.Sequential(
            nn.Linear(feature_dim, feature_dim),
            nn.ReLU(),
            nn.Linear(feature_dim, slot_dim),
        )
        self.norm_features = nn.LayerNorm(slot_dim)

        self.slot_mu = nn.Parameter(torch.zeros(slot_dim))
        self.slot_log_sigma = nn.Parameter(torch.zeros(slot_dim))
        nn.init.xavier_uniform_(self.slot_mu.view(1, -1))
        nn.init.xavier_uniform_(self.slot_log_sigma.view(1, -1))

        self.norm_slots = nn.LayerNorm(slot_dim)
        self.to_q = nn.Linear(slot_dim, slot_dim, bias=False)
        self.to_k = nn.Linear(slot_dim, slot_dim, bias=False)
        self.to_v = nn.Linear(slot_dim, slot_dim, bias=False)
        self.gru = nn.GRUCell(slot_dim, slot_dim)
        mlp_hidden = mlp_hidden or 4 * slot_dim
        self.norm_mlp = nn.LayerNorm(slot_dim)
        self.mlp = nn.Sequential(
            nn.Linear(slot_dim, mlp_hidden),
            nn.ReLU(),
            nn.Linear(mlp_hidden, slot_dim),
        )

    def project_inputs(self, features: torch.Tensor) -> torch.Tensor:
        return self.norm_features(self.input_mlp(self.norm_input(features)))

    def init_slots(self, batch_size: int, n_slots: int,
                   generator: torch.Generator | None = None) -> torch.Tensor:
        """Sample ``B x K x D_slots`` slots as ``mu + exp(log_sigma) * eps``."""
        if n_slots < 1:
            raise ValueError(f"number of slots must be >= 1, got {n_slots}")
        noise = torch.randn(batch_size, n_slots, self.slot_dim, generator=generator,
                            dtype=self.slot_mu.dtype)
        return self.slot_mu + self.slot_log_sigma.exp() * noise

    def iterate(self, slots: torch.Tensor, inputs: torch.Tensor):
        """One attention + update round.

        Returns the new ``B x K x D`` slots and the ``B x K x N`` attention
        (softmax over slots, before the epsilon and token renormalisation).
        """
        if slots.shape[-1] != self.slot_dim or inputs.shape[-1] != self.slot_dim:
            raise ValueError(
                f"expected slot and input width {self.slot_dim}, "
                f"got {slots.shape[-1]} and {inputs.shape[-1]}"
            )
        if slots.shape[0] != inputs.shape[0]:
            raise ValueError("slots and inputs disagree on batch size")
        b, k, d = slots.shape
        q = self.to_q(self.norm_slots(slots))
        keys = self.to_k(inputs)
        values = self.to_v(inputs)

        # slot-major layout keeps each slot's token reduction contiguous
        logits = torch.einsum("bkd,bnd->bkn", q, keys) * d ** -0.5
        attn = slot_softmax(logits, dim=1)
        weights = attn + self.eps
        weights = weights / weights.sum(dim=-1, keepdim=True)
        updates = weights @ values

        slots = self.gru(updates.reshape(b * k, d), slots.reshape(b * k, d)).reshape(b, k, d)
        slots = slots + self.mlp(self.norm_mlp(slots))
        return slots, attn

    def forward(self, features: torch.Tensor, n_slots: int | None = None,
                generator: torch.Generator | None = None, n_iters: int | None = None,
                slots_init: torch.Tensor | None = None):
        """Group ``B x N x D_feat`` features; returns final slots and last attention map."""
        n_iters = self.n_iters if n_iters is None else n_iters
        if n_iters < 1:
            raise ValueError(f"iteration count must be >= 1, got {n_iters}")
        inputs = self.project_inputs(features)
        if slots_init is None:
            if n_slots is None:
                raise ValueError("either n_slots or slots_init is required")
            slots = self.init_slots(features.shape[0], n_slots, generator)
        else:
            slots = slots_init
        attn = None
        for _ in range(n_iters):
            slots, attn = self.iterate(slots, inputs)
        return slots, attn


def group(features: PatchFeatureMap, n_slots: int, n_iters: int, module: SlotAttention,
          generator: torch.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Single-sample convenience wrapper: ``K x D_slots`` slots, ``K x N`` attention."""
    if n_slots < 1 or n_iters < 1:
        raise ValueError("n_slots and n_iters must be >= 1")
    dtype = module.slot_mu.dtype
    x = torch.as_tensor(features.tokens, dtype=dtype)[None]
    with torch.no_grad():
        slots, attn = module(x, n_slots, generator, n_iters)
    return slots[0].numpy(), attn[0].numpy()
