from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from texseg.errors import AllNoise, BadSpec, LengthMismatch, TooFewSamples
from texseg.evaluation import (ConfusionCounts, SynthSpec, baseline_segment, confusion, emit_report,
                               evaluate, metrics, report_lines, synth_textured_mesh)
from texseg.labels import LabelState
from texseg.mesh import build_adjacency
from texseg.patches import facet_descriptors
from texseg.trainer import VARIANTS


def brute_force(pred, gt):
    """Second implementation: explicit loop and exact rationals."""
    tp = fp = fn = tn = 0
    for p, g in zip(pred, gt):
        if p < 0 or g < 0:
            continue
        if p == 1 and g == 1:
            tp += 1
        elif p == 1:
            fp += 1
        elif g == 1:
            fn += 1
        else:
            tn += 1

    def r(a, b):
        return Fraction(a, b) if b else Fraction(0)

    P, R = r(tp, tp + fp), r(tp, tp + fn)
    F = 2 * P * R / (P + R) if P + R else Fraction(0)
    M = (r(tp, tp + fp + fn) + r(tn, tn + fp + fn)) / 2
    return (tp, fp, fn, tn), {"precision": P, "recall": R, "f1": F, "miou": M}


def test_perfect_prediction():
    gt = np.array([1, 0, 1, 1, 0])
    c = confusion(gt, gt)
    assert c.FP == c.FN == 0
    assert metrics(c) == {"precision": 1.0, "recall": 1.0, "f1": 1.0, "miou": 1.0}


def test_total_miss():
    assert confusion(np.ones(10, int), np.zeros(10, int)) == ConfusionCounts(0, 10, 0, 0)


def test_hand_metrics():
    m = metrics(ConfusionCounts(TP=3, FP=1, FN=1, TN=5))
    assert m["precision"] == m["recall"] == m["f1"] == 0.75
    assert m["miou"] == pytest.approx(0.5 * (3 / 5 + 5 / 7)) and round(m["miou"], 4) == 0.6571


def test_degenerate_metrics():
    m = metrics(ConfusionCounts(TP=0, FP=0, FN=0, TN=10))
    assert (m["precision"], m["recall"], m["f1"], m["miou"]) == (0, 0, 0, 0.5)


def test_exclusions_skipped():
    c = confusion(np.array([1, -1, 0, 1]), np.array([1, 1, -1, 0]))
    assert c == ConfusionCounts(1, 1, 0, 0) and c.total == 2


def test_length_mismatch():
    with pytest.raises(LengthMismatch):
        confusion(np.zeros(3), np.zeros(4))


@given(st.integers(0, 2**32 - 1), st.integers(1, 300))
def test_metrics_match_oracle(seed, n):
    rng = np.random.default_rng(seed)
    pred, gt = rng.integers(-1, 2, n), rng.integers(-1, 2, n)
    counts, exact = brute_force(pred.tolist(), gt.tolist())
    c = confusion(LabelState(pred), LabelState(gt))
    assert (c.TP, c.FP, c.FN, c.TN) == counts
    m = metrics(c)
    for k in exact:
        assert abs(m[k] - float(exact[k])) <= 1e-12
    assert 0 <= m["miou"] <= 1 and 0 <= m["f1"] <= 1
    if c.TP == 0:
        assert m["f1"] == 0


# baselines

def _two_blobs(seed=0):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(size=(100, 5)), rng.normal(size=(60, 5)) + 10])
    return X, np.r_[np.zeros(100), np.ones(60)].astype(int)


def test_kmeans_separable_blobs():
    X, y = _two_blobs()
    lab = baseline_segment(X, "kmeans2").labels
    assert (lab == y).all()
    assert (baseline_segment(X, "kmeans2", gt=1 - y).labels == 1 - y).all()


def test_gmm_on_one_blob_is_poor():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(400, 3))
    truth = rng.integers(0, 2, 400)
    lab = baseline_segment(X, "gmm2", gt=truth).labels
    assert evaluate(lab, truth)["f1"] <= 0.75


def test_dbscan_tiny_radius_all_noise():
    X, _ = _two_blobs()
    with pytest.raises(AllNoise):
        baseline_segment(X, "dbscan", {"eps": 1e-9, "min_pts": 5})


def test_dbscan_separable_blobs():
    X, y = _two_blobs()
    lab = baseline_segment(X, "dbscan", {"eps": 3.0, "min_pts": 5}).labels
    assert (lab == y).all()


def test_baseline_too_few():
    with pytest.raises(TooFewSamples):
        baseline_segment(np.zeros((1, 3)), "kmeans2")


def test_baseline_unknown():
    with pytest.raises(ValueError):
        baseline_segment(np.zeros((5, 3)), "spectral")


# synthetic benchmark

def test_flat_synth():
    mesh, gt = synth_textured_mesh(SynthSpec(side=16, amplitude=0.0))
    assert (gt.labels == 0).all()
    sv = facet_descriptors(mesh, build_adjacency(mesh))[:, 1]
    assert np.nanmax(np.abs(sv)) <= 1e-9


def test_half_plane_counts():
    mesh, gt = synth_textured_mesh(SynthSpec(side=64))
    assert mesh.facet_count == 2 * 63 ** 2 == 7938
    frac = gt.labels.mean()
    assert abs(frac - 0.5) < 0.03
    # enumeration oracle: a facet is textured iff one of its vertices has x > 32
    col = (np.arange(7938) // 2) // 63
    assert (gt.labels == (col + 1 > 32)).all()


def test_synth_deterministic():
    for pattern in ("sine", "bumps"):
        spec = SynthSpec(side=24, pattern=pattern, mask="disc", seed=5)
        (m1, g1), (m2, g2) = synth_textured_mesh(spec), synth_textured_mesh(spec)
        assert m1.vertices.tobytes() == m2.vertices.tobytes()
        assert g1.labels.tobytes() == g2.labels.tobytes()


def test_synth_bad_spec():
    for bad in (SynthSpec(side=8), SynthSpec(amplitude=-1.0), SynthSpec(mask="star")):
        with pytest.raises(BadSpec):
            synth_textured_mesh(bad)


@pytest.mark.parametrize("amp,freq_cycles", [(0.02, 1), (0.1, 8), (0.3, 4)])
def test_textured_facets_have_larger_surface_variation(amp, freq_cycles):
    s = 32
    mesh, gt = synth_textured_mesh(SynthSpec(side=s, amplitude=amp, frequency=freq_cycles * 2 * np.pi / s))
    sv = facet_descriptors(mesh, build_adjacency(mesh))[:, 1]
    ok = np.isfinite(sv)
    assert sv[ok & (gt.labels == 1)].mean() > sv[ok & (gt.labels == 0)].mean()


# report

def _m(v):
    return {"precision": v, "recall": v, "f1": v, "miou": v}


def test_report_single_run():
    rep = emit_report([("a", _m(0.123456))])
    assert len(rep["records"]) == 1 and rep["records"][0]["f1"] == 0.123456
    lines = rep["table"].splitlines()
    assert len(lines) == 2 and "12.3" in lines[1] and "12.35" not in lines[1]


def test_report_variant_order():
    rep = emit_report([(v, _m(i / 10), 1.5) for i, v in enumerate(VARIANTS)])
    rows = rep["table"].splitlines()[1:]
    assert [r.split()[0] for r in rows] == list(VARIANTS)
    assert [r["name"] for r in rep["records"]] == list(VARIANTS)
    assert rep["records"][0]["runtime_s"] == 1.5
    assert report_lines(rep).count("\n") == 6


def test_report_empty():
    with pytest.raises(ValueError):
        emit_report([])
