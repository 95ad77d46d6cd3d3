"""Initial patch clustering and the alternating generator/cleaner training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from . import autograd as ag
from .errors import DegenerateClusters, EmptyInput, NonFiniteLoss, TooFewSamples, UnknownVariant
from .labels import LabelState
from .models import (NON_TEXTURE, TEXTURE, ModelConfig, assign_initial_labels, clean_labels,
                     make_models, reconstruction_errors, tlc_loss, tlg_loss)

log = logging.getLogger(__name__)

VARIANTS = ("w/o-ipc", "w/o-cleaner", "w/o-generator", "w/o-dl", "alg+mlc", "full")


@dataclass(frozen=True)
class TrainConfig:
    K: int = 5
    batch_size: int = 128
    max_epochs: int = 200
    beta_c: float = 0.5
    seed: int = 0
    use_ipc: bool = True
    use_cleaner: bool = True
    use_generator: bool = True
    use_dl: bool = True
    model_pair: str = "transformer"
    eps: float = 0.005
    patience: int = 5
    ipc_method: str = "kmeans"
    lr: float = 1e-4
    generator_steps: int = 5
    cleaner_steps: int = 10
    layers: int = 2
    heads: int = 4
    init_std: float = 0.02
    gaussian_mode: str = "target"
    larger_cluster_nontexture: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.K < 2:
            raise ValueError(f"K must be >= 2, got {self.K}")
        if self.batch_size < 2:
            raise ValueError(f"batch size must be >= 2, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 0.0 < self.beta_c < 1.0:
            raise ValueError(f"beta_c must lie in (0, 1), got {self.beta_c}")
        if self.ipc_method not in ("kmeans", "meanshift"):
            raise ValueError(f"unknown IPC method {self.ipc_method!r}")

    def model_config(self, n_k: int, d: int) -> ModelConfig:
        return ModelConfig(n_k=n_k, d=d, layers=self.layers, heads=self.heads, seed=self.seed,
                           init_std=self.init_std, dtype=self.dtype)


# ---------------------------------------------------------------------------
# initial patch clustering


def _as_matrix(features) -> np.ndarray:
    if isinstance(features, np.ndarray):
        X = features
    else:
        X = np.stack([np.asarray(getattr(f, "values", getattr(f, "tokens", f))) for f in features])
    X = np.asarray(X, dtype=np.float64)
    return X.reshape(len(X), -1)


def kmeans(X: np.ndarray, K: int, rng: np.random.Generator, iters: int = 100):
    """Lloyd iterations from a k-means++ start. Returns ``(assign, centres)``."""
    N = len(X)
    centres = np.empty((K, X.shape[1]))
    centres[0] = X[rng.integers(N)]
    d2 = ((X - centres[0]) ** 2).sum(1)
    for k in range(1, K):
        total = d2.sum()
        idx = rng.choice(N, p=d2 / total) if total > 0 else rng.integers(N)
        centres[k] = X[idx]
        d2 = np.minimum(d2, ((X - centres[k]) ** 2).sum(1))
    assign = np.full(N, -1)
    for _ in range(iters):
        dist = ((X[:, None, :] - centres[None]) ** 2).sum(-1)
        new = dist.argmin(1)
        if np.array_equal(new, assign):
            break
        assign = new
        for k in range(K):
            members = X[assign == k]
            if len(members):
                centres[k] = members.mean(0)
    return assign, centres


def median_pairwise_distance(X: np.ndarray) -> float:
    from scipy.spatial.distance import pdist

    return float(np.median(pdist(X)))


def ipc_filter(features, K: int = 5, method: str = "kmeans", seed: int = 0):
    """Cluster the features and keep the members of the two largest clusters.

    Returns ``(kept, assign)``: sorted kept indices and the cluster of every
    instance. Ties in cluster size go to the lower cluster id.
    """
    X = _as_matrix(features)
    N = len(X)
    if N <= K:
        raise TooFewSamples(f"need more than K={K} samples, got {N}")
    if not np.isfinite(X).all():
        raise ValueError("features must be finite")
    if len(np.unique(X, axis=0)) < 2:
        raise DegenerateClusters("all feature vectors are identical")
    if method == "kmeans":
        assign, _ = kmeans(X, K, np.random.default_rng([seed, 0x1FC]))
    elif method == "meanshift":
        from sklearn.cluster import MeanShift

        assign = MeanShift(bandwidth=median_pairwise_distance(X)).fit_predict(X)
    else:
        raise ValueError(f"unknown IPC method {method!r}")
    ids, counts = np.unique(assign, return_counts=True)
    if len(ids) < 2:
        raise DegenerateClusters(f"{method} produced {len(ids)} nonempty cluster(s)")
    top = ids[np.argsort(-counts, kind="stable")[:2]]
    kept = np.flatnonzero(np.isin(assign, top))
    return kept, assign


def cluster_labels(assign: np.ndarray, kept: np.ndarray, larger_is_nontexture: bool = True) -> np.ndarray:
    """0/1 labels for the kept instances from their two clusters."""
    ids, counts = np.unique(assign[kept], return_counts=True)
    big = ids[np.argmax(counts)]
    lab = (assign[kept] != big).astype(np.int8)
    return lab if larger_is_nontexture else 1 - lab


# ---------------------------------------------------------------------------
# convergence


def change_fraction(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float((a != b).sum()) / len(a) if len(a) else 0.0


def convergence_check(history, eps: float = 0.005, patience: int = 5) -> bool:
    """True iff each of the last ``patience`` label transitions changed
    less than ``eps`` of the labels."""
    if len(history) == 0:
        raise ValueError("history must be nonempty")
    if len(history) < patience + 1:
        return False
    recent = history[-(patience + 1):]
    return all(change_fraction(a, b) < eps for a, b in zip(recent[:-1], recent[1:]))


# ---------------------------------------------------------------------------
# training loop


def _tokens(features) -> np.ndarray:
    if isinstance(features, np.ndarray):
        return features
    return np.stack([np.asarray(getattr(f, "tokens", f)) for f in features])


def _batches(idx: np.ndarray, n: int):
    """Split into ceil(len/n) nearly equal batches, so none is a tiny tail."""
    if len(idx) == 0:
        return []
    return np.array_split(idx, math.ceil(len(idx) / n))


class _Loop:
    def __init__(self, G: np.ndarray, cfg: TrainConfig, progress=None):
        self.G = G
        self.cfg = cfg
        self.progress = progress
        self.gen, self.cls = make_models(cfg.model_pair, cfg.model_config(*G.shape[1:]))
        self.gen_opt = ag.Adam(self.gen.params, lr=cfg.lr)
        self.cls_opt = ag.Adam(self.cls.params, lr=cfg.lr)
        self.rng = np.random.default_rng([cfg.seed, 0xB47C])
        self.audit = {"standard_scored": 0, "gaussian_scored": 0, "texture_seen": 0, "non_texture_seen": 0}
        self.epoch = 0

    def _minimize(self, which, fn, steps):
        params, opt = (self.gen.params, self.gen_opt) if which == "tlg" else (self.cls.params, self.cls_opt)
        try:
            return ag.minimize(params, opt, fn, steps)
        except NonFiniteLoss as e:
            raise NonFiniteLoss(f"{which} loss diverged at epoch {self.epoch}: {e}; "
                                f"parameter checksum {params.checksum()}") from None

    def train_generator(self, g, labels, phase):
        cfg = self.cfg
        return self._minimize(
            "tlg", lambda: tlg_loss(self.gen, g, labels, phase, cfg.use_dl, cfg.gaussian_mode),
            cfg.generator_steps)

    def train_cleaner(self, g, labels):
        return self._minimize("tlc", lambda: tlc_loss(self.cls.predict(g), labels),
                              self.cfg.cleaner_steps)

    def standard_errors(self, g):
        return reconstruction_errors(self.gen, g)[0]

    def scores(self, g):
        return self.cls.predict(g).data

    def all_standard_errors(self):
        return np.concatenate([self.standard_errors(self.G[b])
                               for b in _batches(np.arange(len(self.G)), self.cfg.batch_size)])


def run_algorithm1(features, cfg: TrainConfig = TrainConfig(), progress=None,
                   track_errors: bool = False) -> LabelState:
    """Alternate generator and cleaner training over shuffled batches.

    ``features`` is a list of token sequences or an (N, n_k, d) array.
    Epoch 1 trains on the IPC-kept subset (when enabled): the generator
    labels each batch by reconstruction error, the cleaner is fitted on
    those labels and flips confident rows to texture. Later epochs visit
    every instance: the generator pulls texture-labelled rows toward its
    fixed Gaussian, and the cleaner relabels each batch about its mean
    score. All instances are labelled every epoch. ``progress`` receives
    one dict per epoch.
    """
    G = _tokens(features) if not (isinstance(features, (list, tuple)) and len(features) == 0) else None
    if G is None or len(G) == 0:
        raise EmptyInput("no feature vectors to train on")
    G = np.asarray(G, dtype=cfg.dtype)
    if not np.isfinite(G).all():
        raise ValueError("token features must be finite")
    N = len(G)
    if N < 2 * cfg.batch_size:
        log.warning("only %d instances for batch size %d", N, cfg.batch_size)
    if not (cfg.use_generator or cfg.use_cleaner):
        raise ValueError("at least one of generator and cleaner must be enabled")

    loop = _Loop(G, cfg, progress)
    everything = np.arange(N)
    labels = np.zeros(N, dtype=np.int8)
    seed_labels = None
    train_set = everything
    if cfg.use_ipc or not cfg.use_generator:
        kept, assign = ipc_filter(G.reshape(N, -1), cfg.K, cfg.ipc_method, cfg.seed)
        if cfg.use_ipc:
            train_set = kept
        if not cfg.use_generator:
            seed_labels = np.full(N, -1, dtype=np.int8)
            seed_labels[kept] = cluster_labels(assign, kept, cfg.larger_cluster_nontexture)
            train_set = kept
    history = [None]
    records = []
    trace = {}

    # epoch 1
    loop.epoch = 1
    losses_g, losses_c = [], []
    for b in _batches(loop.rng.permutation(train_set), cfg.batch_size):
        g = G[b]
        if cfg.use_generator:
            losses_g.append(loop.train_generator(g, None, 1))
            lab = assign_initial_labels(loop.standard_errors(g))
        else:
            lab = seed_labels[b]
        if cfg.use_cleaner:
            losses_c.append(loop.train_cleaner(g, lab))
            lab = clean_labels(loop.scores(g), "first_epoch", cfg.beta_c, prior=lab)
        labels[b] = lab
    rest = np.setdiff1d(everything, train_set)
    for b in _batches(rest, cfg.batch_size):
        g = G[b]
        if cfg.use_generator:
            lab = assign_initial_labels(loop.standard_errors(g))
            if cfg.use_cleaner:
                lab = clean_labels(loop.scores(g), "first_epoch", cfg.beta_c, prior=lab)
        else:
            lab = clean_labels(loop.scores(g), "later")
        labels[b] = lab
    if track_errors and cfg.use_generator:
        trace["errors_first"] = loop.all_standard_errors()
    history[0] = labels.copy()
    records.append(_record(1, losses_g, losses_c, labels, None))
    _emit(progress, records[-1])

    # epochs 2..
    epoch = 1
    converged = False
    for epoch in range(2, cfg.max_epochs + 1):
        loop.epoch = epoch
        losses_g, losses_c = [], []
        for b in _batches(loop.rng.permutation(everything), cfg.batch_size):
            g = G[b]
            lab = labels[b]
            if cfg.use_generator:
                losses_g.append(loop.train_generator(g, lab, 2))
                _, n3, n5 = reconstruction_errors(loop.gen, g, lab, cfg.use_dl, cfg.gaussian_mode)
                loop.audit["standard_scored"] += n3
                loop.audit["gaussian_scored"] += n5
                loop.audit["texture_seen"] += int((lab == TEXTURE).sum())
                loop.audit["non_texture_seen"] += int((lab == NON_TEXTURE).sum())
            if cfg.use_cleaner:
                losses_c.append(loop.train_cleaner(g, lab))
                new = clean_labels(loop.scores(g), "later")
            else:
                new = assign_initial_labels(loop.standard_errors(g))
            labels[b] = new
        records.append(_record(epoch, losses_g, losses_c, labels, history[-1]))
        history.append(labels.copy())
        _emit(progress, records[-1])
        if convergence_check(history, cfg.eps, cfg.patience):
            converged = True
            break
    if track_errors and cfg.use_generator:
        trace["errors_final"] = loop.all_standard_errors()
    trace["converged"] = converged
    state = LabelState(labels.copy(), history=records, iteration=epoch,
                       audit=dict(loop.audit),
                       trace=trace, models=(loop.gen, loop.cls))
    return state


def _record(epoch, lg, lc, labels, prev):
    changed = None if prev is None else int((labels != prev).sum())
    return {
        "epoch": epoch,
        "tlg_loss": float(np.mean(lg)) if lg else None,
        "tlc_loss": float(np.mean(lc)) if lc else None,
        "texture": int((labels == TEXTURE).sum()),
        "non_texture": int((labels == NON_TEXTURE).sum()),
        "changed": changed,
        "change_fraction": None if prev is None else changed / len(labels),
    }


def _emit(progress, rec):
    if progress is not None:
        progress(rec)


# ---------------------------------------------------------------------------
# ablations


def variant_config(variant: str, cfg: TrainConfig) -> TrainConfig:
    if variant not in VARIANTS:
        raise UnknownVariant(f"unknown ablation {variant!r}; choose from {VARIANTS}")
    changes = {
        "w/o-ipc": {"use_ipc": False},
        "w/o-cleaner": {"use_cleaner": False},
        "w/o-generator": {"use_generator": False},
        "w/o-dl": {"use_dl": False},
        "alg+mlc": {"model_pair": "alg+mlc"},
        "full": {},
    }[variant]
    return replace(cfg, **changes)


def run_ablation(variant: str, features, cfg: TrainConfig = TrainConfig(), progress=None) -> LabelState:
    return run_algorithm1(features, variant_config(variant, cfg), progress)
