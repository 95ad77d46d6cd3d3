import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from texseg import autograd as ag
from texseg.autograd import Tensor, grad_check
from texseg.errors import EmptyBatch, NonFiniteError, ShapeMismatch
from texseg.models import (ALG, ALG_WIDTHS, MLC, TLC, TLG, ModelConfig, assign_initial_labels,
                           clean_labels, compute_error, make_models, reconstruction_errors, tlc_loss,
                           tlg_loss)

SMALL = ModelConfig(n_k=4, d=8, heads=2, seed=3, init_std=0.3)


def _zero(params, suffixes):
    for name, p in params.items():
        if any(name.endswith(s) for s in suffixes):
            p.data = np.zeros_like(p.data)


class Stub:
    """Generator whose reconstruction is a fixed array."""

    kind = "tlg"
    dtype = np.dtype(np.float64)

    def __init__(self, recon, gaussian=None):
        self.recon = np.asarray(recon, float)
        self.gaussian = None if gaussian is None else np.asarray(gaussian, float)

    def target(self, g):
        return np.asarray(g, float)

    def reconstruct(self, g):
        return Tensor(self.recon)


# generator

def test_projector_zeroed_branches_is_identity(rng):
    m = TLG(SMALL)
    _zero(m.params, [f"proj.{x}.{s}" for x in range(2) for s in ("attn.o.w", "attn.o.b", "mlp.fc2.w", "mlp.fc2.b")])
    g = rng.normal(size=(3, 4, 8))
    assert (m.project(g).data == g).all()


def test_projector_shape_and_determinism(rng):
    m = TLG(SMALL)
    g = rng.normal(size=(5, 4, 8))
    a, b = m.project(g).data, m.project(g).data
    assert a.shape == g.shape and a.tobytes() == b.tobytes()


def test_inverse_zeroed_branches_is_identity(rng):
    m = TLG(SMALL)
    _zero(m.params, ["attn1.o.w", "attn1.o.b", "attn2.o.w", "attn2.o.b", "mlp.fc2.w", "mlp.fc2.b"])
    p = rng.normal(size=(2, 4, 8))
    out = m.inverse(p).data
    assert (out == p).all() and out.shape == p.shape


def test_bias_enters_only_queries_and_keys(rng):
    m = TLG(SMALL)
    _zero(m.params, ["attn1.v.w", "attn1.v.b", "attn2.v.w", "attn2.v.b"])
    p = rng.normal(size=(2, 4, 8))
    before = m.inverse(p).data.copy()
    m.params["bias_b"].data = rng.normal(size=(4, 8)) * 5
    assert np.array_equal(m.inverse(p).data, before)


def test_bias_matters_normally(rng):
    m = TLG(SMALL)
    p = rng.normal(size=(2, 4, 8))
    before = m.inverse(p).data.copy()
    m.params["bias_b"].data = rng.normal(size=(4, 8)) * 5
    assert not np.allclose(m.inverse(p).data, before)


def test_gaussian_fixed_by_seed():
    a, b, c = TLG(SMALL), TLG(SMALL), TLG(ModelConfig(n_k=4, d=8, heads=2, seed=4))
    assert a.gaussian.tobytes() == b.gaussian.tobytes() != c.gaussian.tobytes()
    assert not a.gaussian.flags.writeable
    assert a.params.checksum() == b.params.checksum()


def test_token_shape_checked(rng):
    with pytest.raises(ShapeMismatch):
        TLG(SMALL).project(rng.normal(size=(2, 5, 8)))


# losses

def test_perfect_reconstruction_loss_zero(rng):
    g = rng.normal(size=(3, 2, 2))
    assert float(tlg_loss(Stub(g), g).data) == 0.0


def test_l1_hand_example():
    g = np.array([[[1.0, 2.0]]])
    assert float(tlg_loss(Stub(np.zeros((1, 1, 2))), g).data) == 3.0


def test_gaussian_target_for_texture_rows():
    gauss = np.array([[0.5, -0.25]])
    g = np.array([[[1.0, 2.0]], [[3.0, 4.0]]])
    recon = np.array([[[0.5, -0.25]], [[3.0, 4.0]]])
    stub = Stub(recon, gauss)
    assert float(tlg_loss(stub, g, np.array([1, 0]), phase=2).data) == 0.0
    # phase 1 and disabled DL compare against the input
    assert float(tlg_loss(stub, g, np.array([1, 0]), phase=1).data) == 0.5 + 2.25
    assert float(tlg_loss(stub, g, np.array([1, 0]), phase=2, use_dl=False).data) == 2.75


def test_input_mode_replaces_texture_inputs(rng):
    m = TLG(SMALL)
    g = rng.normal(size=(2, 4, 8))
    lab = np.array([1, 0])
    a = float(tlg_loss(m, g, lab, phase=2, mode="input").data)
    direct = np.abs(m.reconstruct(np.stack([m.gaussian, g[1]])).data - np.stack([m.gaussian, g[1]])).sum()
    assert a == pytest.approx(direct, rel=1e-12)


def test_empty_batch():
    with pytest.raises(EmptyBatch):
        tlg_loss(TLG(SMALL), np.zeros((0, 4, 8)))
    with pytest.raises(EmptyBatch):
        tlc_loss(np.zeros(0), np.zeros(0))


def test_compute_error_examples(rng):
    g = rng.normal(size=(4, 8))
    assert compute_error(g, g) == 0
    assert compute_error(g, g * 2, "gaussian", g * 2) == 0
    assert compute_error([1.0, 0.0], [0.0, 1.0]) == 2.0
    with pytest.raises(ShapeMismatch):
        compute_error(g, g[:2])


def test_reconstruction_errors_audit(rng):
    m = TLG(SMALL)
    g = rng.normal(size=(5, 4, 8))
    lab = np.array([1, 0, 1, 1, 0])
    err, n_std, n_gauss = reconstruction_errors(m, g, lab, use_gaussian=True)
    assert (n_std, n_gauss) == (2, 3)
    recon = m.reconstruct(g).data
    assert err[0] == pytest.approx(compute_error(g[0], recon[0], "gaussian", m.gaussian))
    assert err[1] == pytest.approx(compute_error(g[1], recon[1]))
    assert reconstruction_errors(m, g, lab, use_gaussian=False)[1:] == (5, 0)


def test_bce_examples():
    assert float(tlc_loss(np.array([1.0 - 1e-12]), np.array([1])).data) < 1e-6
    assert float(tlc_loss(np.array([0.5]), np.array([1])).data) == pytest.approx(math.log(2))
    assert float(tlc_loss(np.array([0.5]), np.array([0])).data) == pytest.approx(0.6931, abs=1e-4)
    assert math.isfinite(float(tlc_loss(np.array([0.0, 1.0]), np.array([1, 0])).data))


# cleaner

def test_cleaner_zero_head_gives_half(rng):
    m = TLC(SMALL)
    m.params["cls.head.w"].data[:] = 0
    m.params["cls.head.b"].data[:] = 0
    assert (m.predict(rng.normal(size=(3, 4, 8))).data == 0.5).all()


@given(st.integers(0, 2**32 - 1), st.floats(0.1, 100))
def test_cleaner_output_in_open_interval(seed, scale):
    rng = np.random.default_rng(seed)
    m = TLC(ModelConfig(n_k=4, d=8, heads=2, seed=seed % 1000, init_std=0.5))
    phi = m.predict(rng.normal(size=(4, 4, 8)) * scale).data
    assert ((phi > 0) & (phi < 1)).all()


def test_cleaner_deterministic(rng):
    m = TLC(SMALL)
    g = rng.normal(size=(3, 4, 8))
    assert m.predict(g).data.tobytes() == m.predict(g).data.tobytes()


# label rules

def test_initial_label_examples():
    assert assign_initial_labels([1, 2, 3]).tolist() == [0, 1, 1]
    assert assign_initial_labels([4.2] * 5).tolist() == [1] * 5
    with pytest.raises(EmptyBatch):
        assign_initial_labels([])
    with pytest.raises(NonFiniteError):
        assign_initial_labels([1.0, float("nan")])


def test_clean_label_examples():
    assert clean_labels([0.2, 0.6, 0.7], "later").tolist() == [0, 1, 1]
    assert clean_labels([0.9], "first_epoch", 0.5, prior=[0]).tolist() == [1]
    assert clean_labels([0.3, 0.3, 0.3], "later").tolist() == [1, 1, 1]
    assert clean_labels([0.4, 0.5, 0.6], "first_epoch", 0.5, prior=[1, 0, 0]).tolist() == [1, 0, 1]
    with pytest.raises(ValueError):
        clean_labels([0.4], "first_epoch", 1.0, prior=[0])


ints = st.lists(st.integers(-10**6, 10**6), min_size=1, max_size=200)


@given(ints, st.integers(-10**6, 10**6))
def test_rules_shift_invariant(vals, c):
    v = np.array(vals, float)
    assert (assign_initial_labels(v + c) == assign_initial_labels(v)).all()
    assert (clean_labels(v + c, "later") == clean_labels(v, "later")).all()


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=200), st.randoms())
def test_rules_permutation_equivariant(vals, rnd):
    v = np.array(vals)
    perm = list(range(len(v)))
    rnd.shuffle(perm)
    assert (assign_initial_labels(v[perm]) == assign_initial_labels(v)[perm]).all()
    assert (clean_labels(v[perm], "later") == clean_labels(v, "later")[perm]).all()


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=2, max_size=200))
def test_two_distinct_values_give_both_classes(vals):
    if len(set(vals)) < 2:
        return
    lab = assign_initial_labels(vals)
    assert lab.min() == 0 and lab.max() == 1


# ablation pair

def test_alg_widths():
    m = ALG(ModelConfig())
    assert ALG.widths == ALG_WIDTHS == (1024, 512, 256, 128, 256, 512, 1024)
    dims = [m.params[f"alg.{i}.w"].shape for i in range(6)]
    assert [d[0] for d in dims] + [dims[-1][1]] == list(ALG_WIDTHS)


def test_alg_perfect_reconstruction_loss_zero(rng):
    m = ALG(ModelConfig(n_k=4, d=8))
    m.reconstruct = lambda g: Tensor(m.target(g))
    assert float(tlg_loss(m, rng.normal(size=(3, 4, 8))).data) == 0.0


def test_pairs_share_interfaces(rng):
    g = rng.normal(size=(6, 4, 8))
    lab = np.array([1, 0, 0, 1, 1, 0])
    for pair in ("transformer", "alg+mlc"):
        gen, cls = make_models(pair, SMALL)
        for phase in (1, 2):
            assert np.isfinite(float(tlg_loss(gen, g, lab, phase=phase).data))
        err, *_ = reconstruction_errors(gen, g, lab, use_gaussian=True)
        assert err.shape == (6,)
        phi = cls.predict(g)
        assert phi.shape == (6,)
        assert np.isfinite(float(tlc_loss(phi, lab).data))
    with pytest.raises(ValueError):
        make_models("cnn", SMALL)


@pytest.mark.parametrize("which", ["alg", "mlc"])
def test_mlp_pair_gradients(which, rng):
    cfg = ModelConfig(n_k=4, d=8, seed=1)
    g = rng.normal(size=(4, 4, 8))
    lab = np.array([1, 0, 1, 0])
    if which == "alg":
        m = ALG(cfg)
        f = lambda: tlg_loss(m, g, lab, phase=2)
    else:
        m = MLC(cfg)
        f = lambda: tlc_loss(m.predict(g), lab)
    assert grad_check(f, m.params, samples=100) < 1e-4
