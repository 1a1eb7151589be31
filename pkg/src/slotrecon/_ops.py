"""Reductions over the slot axis that do not depend on slot order.

Slots are an unordered set, so anything reducing across them (the softmax
normaliser, mixing of per-slot outputs) sums values in sorted order. That
makes permuting the slots change the result by exactly nothing, instead of
by a few ulps of summation-order noise.
"""

import torch


def symmetric_sum(x: torch.Tensor, dim: int, keepdim: bool = False) -> torch.Tensor:
    return x.sort(dim=dim).values.sum(dim=dim, keepdim=keepdim)


def slot_softmax(logits: torch.Tensor, dim: int) -> torch.Tensor:
    shifted = logits - logits.amax(dim=dim, keepdim=True).detach()
    e = shifted.exp()
    return e / symmetric_sum(e, dim, keepdim=True)
