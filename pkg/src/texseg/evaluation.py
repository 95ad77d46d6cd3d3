"""Facet-level metrics, clustering baselines and the synthetic benchmark."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import AllNoise, BadSpec, LengthMismatch, TooFewSamples
from .labels import LabelState
from .mesh import Mesh


@dataclass(frozen=True)
class ConfusionCounts:
    TP: int = 0
    FP: int = 0
    FN: int = 0
    TN: int = 0

    @property
    def total(self) -> int:
        return self.TP + self.FP + self.FN + self.TN


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "labels", x))


def confusion(pred, gt) -> ConfusionCounts:
    """Texture is the positive class; facets excluded on either side are skipped."""
    p, g = _arr(pred), _arr(gt)
    if p.shape != g.shape:
        raise LengthMismatch(f"{len(p)} predictions vs {len(g)} ground-truth labels")
    keep = (p >= 0) & (g >= 0)
    p, g = p[keep] == 1, g[keep] == 1
    return ConfusionCounts(
        TP=int((p & g).sum()), FP=int((p & ~g).sum()),
        FN=int((~p & g).sum()), TN=int((~p & ~g).sum()),
    )


def _ratio(a, b) -> float:
    return a / b if b else 0.0


def metrics(c: ConfusionCounts) -> dict:
    """Precision, recall, F1 and two-class mean IoU.

    Any ratio with a zero denominator is reported as 0.
    """
    p = _ratio(c.TP, c.TP + c.FP)
    r = _ratio(c.TP, c.TP + c.FN)
    f1 = _ratio(2 * p * r, p + r)
    miou = 0.5 * (_ratio(c.TP, c.TP + c.FP + c.FN) + _ratio(c.TN, c.TN + c.FP + c.FN))
    return {"precision": p, "recall": r, "f1": f1, "miou": miou}


def evaluate(pred, gt) -> dict:
    return metrics(confusion(pred, gt))


# ---------------------------------------------------------------------------
# baselines


def align_to_gt(partition: np.ndarray, gt) -> np.ndarray:
    """Pick the cluster-to-class mapping of a 0/1 partition with the best F1."""
    a = partition.astype(np.int8)
    b = (1 - a).astype(np.int8)
    return a if evaluate(a, gt)["f1"] >= evaluate(b, gt)["f1"] else b


def baseline_segment(features, method: str = "kmeans2", params: dict | None = None,
                     gt=None, seed: int = 0) -> LabelState:
    """Two-way clustering of feature vectors.

    With ``gt`` the clusters are mapped to classes to maximise F1 (the
    usual alignment for unsupervised outputs); without it the larger
    cluster is called non-texture. DBSCAN keeps its two largest clusters
    and sends noise and any other cluster to the smaller one.
    """
    from sklearn.cluster import DBSCAN, KMeans
    from sklearn.mixture import GaussianMixture

    X = np.asarray([getattr(f, "values", f) for f in features], dtype=np.float64)
    params = dict(params or {})
    if len(X) < 2:
        raise TooFewSamples(f"need at least 2 samples, got {len(X)}")
    if method == "kmeans2":
        assign = KMeans(n_clusters=2, n_init=10, random_state=seed).fit_predict(X)
    elif method == "gmm2":
        assign = GaussianMixture(n_components=2, random_state=seed,
                                 covariance_type=params.get("covariance_type", "full"),
                                 reg_covar=params.get("reg_covar", 1e-6)).fit_predict(X)
    elif method == "dbscan":
        eps = params.get("eps")
        min_pts = int(params.get("min_pts", 5))
        if eps is None:
            eps = default_dbscan_eps(X, min_pts)
        if eps <= 0:
            raise AllNoise("DBSCAN radius must be positive")
        raw = DBSCAN(eps=eps, min_samples=min_pts).fit_predict(X)
        ids, counts = np.unique(raw[raw >= 0], return_counts=True)
        if len(ids) == 0:
            raise AllNoise(f"DBSCAN found no core points at eps={eps:.4g}, minPts={min_pts}")
        order = ids[np.argsort(-counts, kind="stable")]
        assign = np.ones(len(X), dtype=np.int64)
        # second cluster, any further clusters and noise form the smaller side
        assign[raw == order[0]] = 0
    else:
        raise ValueError(f"unknown baseline {method!r}")
    assign = np.asarray(assign, dtype=np.int8)
    if gt is not None:
        lab = align_to_gt(assign, gt)
    else:
        ones = int(assign.sum())
        lab = assign if ones <= len(assign) - ones else 1 - assign
    return LabelState(lab.astype(np.int8))


def default_dbscan_eps(X: np.ndarray, min_pts: int) -> float:
    """Median distance to the ``min_pts``-th neighbour."""
    from sklearn.neighbors import NearestNeighbors

    k = min(min_pts, len(X) - 1)
    dist, _ = NearestNeighbors(n_neighbors=k + 1).fit(X).kneighbors(X)
    return float(np.median(dist[:, -1]))


# ---------------------------------------------------------------------------
# synthetic benchmark

MASKS = ("half", "disc", "band", "all")
PATTERNS = ("sine", "bumps", "none")


@dataclass(frozen=True)
class SynthSpec:
    """Planar ``side x side`` vertex grid with a displaced textured region.

    ``frequency`` defaults to eight periods across the grid.
    """

    side: int = 64
    mask: str = "half"
    pattern: str = "sine"
    amplitude: float = 0.1
    frequency: float | None = None
    seed: int = 0

    @property
    def freq(self) -> float:
        return 8 * 2 * math.pi / self.side if self.frequency is None else self.frequency


def _mask(spec: SynthSpec, x, y):
    s = spec.side
    if spec.mask == "half":
        # strict: the default sine vanishes on the seam column, which stays flat
        return x > s / 2
    if spec.mask == "disc":
        c = (s - 1) / 2
        return (x - c) ** 2 + (y - c) ** 2 <= (s / 4) ** 2
    if spec.mask == "band":
        return np.abs(x - (s - 1) / 2) <= s / 8
    return np.ones_like(x, dtype=bool)


def synth_textured_mesh(spec: SynthSpec = SynthSpec()):
    """Return ``(mesh, gt)``: the displaced grid and per-facet ground truth
    (1 where a facet has a vertex inside the textured region)."""
    s = spec.side
    if s < 16:
        raise BadSpec(f"side must be >= 16, got {s}")
    if spec.amplitude < 0 or not math.isfinite(spec.amplitude):
        raise BadSpec(f"amplitude must be >= 0, got {spec.amplitude}")
    if spec.mask not in MASKS or spec.pattern not in PATTERNS:
        raise BadSpec(f"mask in {MASKS}, pattern in {PATTERNS}")
    y, x = np.mgrid[0:s, 0:s].astype(np.float64)
    inside = _mask(spec, x, y)
    displaced = inside & (spec.amplitude > 0) & (spec.pattern != "none")
    z = np.zeros_like(x)
    if spec.pattern == "sine":
        z = spec.amplitude * np.sin(spec.freq * x) * np.sin(spec.freq * y)
    elif spec.pattern == "bumps":
        rng = np.random.default_rng(spec.seed)
        period = 2 * math.pi / spec.freq
        ys, xs = np.nonzero(inside)
        count = max(1, int(len(xs) / (period * period)))
        pick = rng.choice(len(xs), size=min(count, len(xs)), replace=False)
        width = period / 4
        for k in pick:
            r2 = (x - xs[k]) ** 2 + (y - ys[k]) ** 2
            z += spec.amplitude * rng.uniform(0.5, 1.0) * np.exp(-r2 / (2 * width * width))
    z = np.where(displaced, z, 0.0)
    verts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    i, j = np.mgrid[0:s - 1, 0:s - 1]
    a = (j * s + i).ravel()
    b, c, d = a + 1, a + s, a + s + 1
    faces = np.stack([np.stack([a, b, d], 1), np.stack([a, d, c], 1)], axis=1).reshape(-1, 3)
    mesh = Mesh(verts, faces)
    gt = displaced.ravel()[faces].any(axis=1).astype(np.int8)
    return mesh, LabelState(gt)


# ---------------------------------------------------------------------------
# reports


def emit_report(runs) -> dict:
    """Records and an aligned text table for ``[(name, metrics[, seconds])]``.

    Table values are percentages with one decimal; records keep full
    precision.
    """
    runs = list(runs)
    if not runs:
        raise ValueError("no runs to report")
    records = []
    for run in runs:
        name, m = run[0], run[1]
        secs = run[2] if len(run) > 2 else None
        records.append({"name": name, "precision": m["precision"], "recall": m["recall"],
                        "f1": m["f1"], "miou": m["miou"], "runtime_s": secs})
    width = max(len("run"), *(len(r["name"]) for r in records))
    head = f"{'run':<{width}}  {'Pre':>6}  {'Rec':>6}  {'F1':>6}  {'mIoU':>6}"
    rows = [head]
    for r in records:
        rows.append(f"{r['name']:<{width}}  {100 * r['precision']:6.1f}  {100 * r['recall']:6.1f}"
                    f"  {100 * r['f1']:6.1f}  {100 * r['miou']:6.1f}")
    return {"records": records, "table": "\n".join(rows)}


def report_lines(report: dict) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in report["records"])


def spec_dict(spec: SynthSpec) -> dict:
    return asdict(spec)
