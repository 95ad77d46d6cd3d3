"""Transformer building blocks on top of :mod:`texseg.autograd`."""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Initializer, Tensor
from .errors import HeadsIndivisible, ShapeMismatch


def linear(x: Tensor, p, name: str) -> Tensor:
    return ag.add(ag.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])


def init_msa(init: Initializer, prefix: str, d: int):
    for proj in ("q", "v", "o"):
        init.linear(f"{prefix}.{proj}", d, d)
    # a key bias only shifts every score of a query equally; softmax ignores it
    init.normal(f"{prefix}.k.w", (d, d))


def init_mlp(init: Initializer, prefix: str, d: int, hidden: int | None = None):
    hidden = 4 * d if hidden is None else hidden
    init.linear(f"{prefix}.fc1", d, hidden)
    init.linear(f"{prefix}.fc2", hidden, d)


def msa(q: Tensor, k: Tensor, v: Tensor, p, heads: int, return_weights: bool = False):
    """Multi-head scaled dot-product attention.

    Inputs are (..., n_k, d); ``p`` provides ``q/k/v/o`` linear maps. Each
    head attends with scale ``1/sqrt(d/heads)``; head outputs are
    concatenated and passed through the output projection.
    """
    if not (q.shape == k.shape == v.shape):
        raise ShapeMismatch(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    *lead, n, d = q.shape
    if heads < 1 or d % heads:
        raise HeadsIndivisible(f"{heads} heads do not divide model width {d}")
    if p["q.w"].shape != (d, d):
        raise ShapeMismatch(f"attention weights {p['q.w'].shape} for width {d}")
    dh = d // heads

    def split(t):
        t = ag.reshape(t, (*lead, n, heads, dh))
        nd = len(lead)
        return ag.transpose(t, (*range(nd), nd + 1, nd, nd + 2))

    qh = split(linear(q, p, "q"))
    kh = split(ag.matmul(k, p["k.w"]))
    vh = split(linear(v, p, "v"))
    nd = len(lead)
    kt = ag.transpose(kh, (*range(nd + 1), nd + 2, nd + 1))
    scores = ag.mul(ag.matmul(qh, kt), 1.0 / math.sqrt(dh))
    w = ag.softmax(scores)
    tol = 1e-6 if w.data.dtype == np.float64 else 1e-5
    assert np.abs(w.data.sum(axis=-1) - 1.0).max() < tol, "attention rows must sum to 1"
    ctx = ag.matmul(w, vh)
    ctx = ag.transpose(ctx, (*range(nd), nd + 1, nd, nd + 2))
    ctx = ag.reshape(ctx, (*lead, n, d))
    out = linear(ctx, p, "o")
    if return_weights:
        return out, w.data
    return out


def mlp(x: Tensor, p) -> Tensor:
    """Linear -> GELU -> linear."""
    d = x.shape[-1]
    if p["fc1.w"].shape[0] != d or p["fc2.w"].shape[1] != d:
        raise ShapeMismatch(f"MLP weights {p['fc1.w'].shape}/{p['fc2.w'].shape} for width {d}")
    return linear(ag.gelu(linear(x, p, "fc1")), p, "fc2")


def ln(x: Tensor, p, name: str) -> Tensor:
    return ag.layer_norm(x, p[f"{name}.gain"], p[f"{name}.bias"])
