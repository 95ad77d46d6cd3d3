"""Finite-difference verification of the hand-written backward passes."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Initializer, ParamSet, Tensor
from .layers import init_mlp, init_msa, ln, mlp, msa
from .models import TLC, TLG, ModelConfig, tlc_loss, tlg_loss

TOLERANCE = 1e-4


def _weighted(out: Tensor, rng) -> Tensor:
    # a random linear read-out gives every output coordinate its own weight
    w = Tensor(rng.normal(size=out.shape))
    return ag.tsum(ag.mul(out, w))


def _check_layer_norm(samples, seed):
    rng = np.random.default_rng(seed)
    ps = ParamSet(np.float64)
    ps.add("x", rng.normal(size=(4, 6, 16)))
    ps.add("ln.gain", 1.0 + 0.3 * rng.normal(size=16))
    ps.add("ln.bias", 0.3 * rng.normal(size=16))
    w = Tensor(rng.normal(size=(4, 6, 16)))
    return ag.grad_check(lambda: ag.tsum(ag.mul(ln(ps["x"], ps, "ln"), w)), ps, samples=samples, seed=seed)


def _check_msa(samples, seed):
    rng = np.random.default_rng(seed)
    ps = ParamSet(np.float64)
    init = Initializer(ps, seed, std=0.3)
    init_msa(init, "attn", 16)
    ps.add("x", rng.normal(size=(3, 8, 16)))
    w = Tensor(rng.normal(size=(3, 8, 16)))
    a = ps.scope("attn")
    return ag.grad_check(lambda: ag.tsum(ag.mul(msa(ps["x"], ps["x"], ps["x"], a, 4), w)), ps,
                         samples=samples, seed=seed)


def _check_mlp(samples, seed):
    rng = np.random.default_rng(seed)
    ps = ParamSet(np.float64)
    init = Initializer(ps, seed, std=0.3)
    init_mlp(init, "mlp", 16)
    ps.add("x", rng.normal(size=(3, 8, 16)))
    w = Tensor(rng.normal(size=(3, 8, 16)))
    return ag.grad_check(lambda: ag.tsum(ag.mul(mlp(ps["x"], ps.scope("mlp")), w)), ps,
                         samples=samples, seed=seed)


def _tokens(seed, B=4):
    return np.random.default_rng([seed, 7]).normal(size=(B, 16, 16))


def _check_tlg(samples, seed, phase):
    m = TLG(ModelConfig(seed=seed, init_std=0.3))
    g = _tokens(seed)
    labels = np.array([1, 0, 1, 0])
    return ag.grad_check(lambda: tlg_loss(m, g, labels, phase=phase), m.params, samples=samples, seed=seed)


def _check_tlc(samples, seed):
    m = TLC(ModelConfig(seed=seed, init_std=0.3))
    g = _tokens(seed)
    labels = np.array([1, 0, 1, 0])
    return ag.grad_check(lambda: tlc_loss(m.predict(g), labels), m.params, samples=samples, seed=seed)


CHECKS = {
    "layer_norm": _check_layer_norm,
    "msa": _check_msa,
    "mlp": _check_mlp,
    "tlg_loss_plain": lambda s, seed: _check_tlg(s, seed, 1),
    "tlg_loss_gaussian": lambda s, seed: _check_tlg(s, seed, 2),
    "tlc_loss": _check_tlc,
}


def run_suite(samples: int = 100, seed: int = 0) -> dict:
    """Worst relative error per component at 64-bit precision."""
    return {name: float(fn(samples, seed)) for name, fn in CHECKS.items()}
