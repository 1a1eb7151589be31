"""Shared numeric helpers for tests."""

import math

import numpy as np
import torch


def finite_difference_check(loss_fn, params, n_entries=6, h=1e-6, seed=0):
    """Relative error between autograd and central differences on sampled parameter entries.

    ``loss_fn`` must be deterministic (re-seed any noise inside it).
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    pick = np.random.default_rng(seed)
    analytic, numeric = [], []
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat, gflat = p.view(-1), g.reshape(-1)
            for i in pick.choice(flat.numel(), size=min(n_entries, flat.numel()), replace=False):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                numeric.append((up - down) / (2 * h))
                analytic.append(gflat[i].item())
    a, n = np.array(analytic), np.array(numeric)
    return np.linalg.norm(a - n) / max(np.linalg.norm(n), 1e-12)


# scalar reference arithmetic on plain Python lists


def as_list(t):
    return t.detach().numpy().tolist()


def layer_norm(x, ln):
    w, b = as_list(ln.weight), as_list(ln.bias)
    mean = sum(x) / len(x)
    var = sum((v - mean) ** 2 for v in x) / len(x)
    return [(v - mean) / math.sqrt(var + ln.eps) * w[i] + b[i] for i, v in enumerate(x)]


def affine(x, weight, bias=None):
    w = as_list(weight)
    b = as_list(bias) if bias is not None else [0.0] * len(w)
    return [sum(w[o][i] * x[i] for i in range(len(x))) + b[o] for o in range(len(w))]


def linear(x, lin):
    return affine(x, lin.weight, lin.bias)


def relu(x):
    return [max(v, 0.0) for v in x]


def sigmoid(v):
    return 1 / (1 + math.exp(-v))


def gru_cell(x, h, gru):
    d = len(h)
    gi = affine(x, gru.weight_ih, gru.bias_ih)
    gh = affine(h, gru.weight_hh, gru.bias_hh)
    r = [sigmoid(gi[i] + gh[i]) for i in range(d)]
    z = [sigmoid(gi[d + i] + gh[d + i]) for i in range(d)]
    n = [math.tanh(gi[2 * d + i] + r[i] * gh[2 * d + i]) for i in range(d)]
    return [(1 - z[i]) * n[i] + z[i] * h[i] for i in range(d)]
