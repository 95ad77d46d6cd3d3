"""Frozen feature extractors and token sequences.

The extractor stands in for a pretrained image backbone: it is built once
from a seed and never updated. Features can also be loaded from a file
produced by any external backbone (``kind="precomputed"``).
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import binfmt
from .errors import DimensionMismatch, IndivisibleDimension, TruncatedFile

KINDS = ("fixed-projection", "identity-pool", "precomputed")
CONV_FILTERS = 16
CONV_SIZE = 5


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    center: int


@dataclass(frozen=True, eq=False)
class TokenSequence:
    tokens: np.ndarray  # (n_k, d)
    center: int

    @property
    def shape(self):
        return self.tokens.shape


@dataclass(frozen=True, eq=False)
class Extractor:
    """Frozen map from (c, n, n) patch images to D-dimensional features.

    ``fixed-projection``: seeded 5x5 convolution bank (16 filters), ReLU,
    global average and max pooling, seeded linear projection to D.
    ``identity-pool``: the flattened image averaged over D contiguous bins.
    ``precomputed``: lookup by centre facet in a loaded feature table.
    """

    kind: str = "fixed-projection"
    seed: int = 0
    D: int = 256
    c: int = 3
    n: int = 24
    conv_bias: bool = False
    table: dict | None = field(default=None, repr=False)
    _params: dict = field(default_factory=dict, repr=False, init=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown extractor kind {self.kind!r}; choose from {KINDS}")
        params = {}
        if self.kind == "fixed-projection":
            if self.n < CONV_SIZE:
                raise DimensionMismatch(f"grid {self.n} smaller than the {CONV_SIZE}x{CONV_SIZE} kernels")
            rng = np.random.default_rng(self.seed)
            fan = self.c * CONV_SIZE * CONV_SIZE
            params["filters"] = rng.normal(0.0, 1.0 / np.sqrt(fan),
                                           size=(CONV_FILTERS, self.c, CONV_SIZE, CONV_SIZE))
            params["bias"] = (rng.normal(0.0, 0.1, size=CONV_FILTERS) if self.conv_bias
                              else np.zeros(CONV_FILTERS))
            params["proj"] = rng.normal(0.0, 1.0 / np.sqrt(2 * CONV_FILTERS),
                                        size=(2 * CONV_FILTERS, self.D))
        elif self.kind == "identity-pool":
            if self.c * self.n * self.n < self.D:
                raise DimensionMismatch(
                    f"identity-pool cannot produce D={self.D} from {self.c}x{self.n}x{self.n} images"
                )
        elif self.table is None:
            raise ValueError("precomputed extractor needs a feature table")
        for a in params.values():
            a.flags.writeable = False
        object.__setattr__(self, "_params", params)

    @classmethod
    def from_file(cls, path) -> "Extractor":
        ids, mat = read_feature_matrix(path)
        table = {int(i): row for i, row in zip(ids, mat)}
        return cls(kind="precomputed", D=mat.shape[1], table=table)

    def checksum(self) -> str:
        h = hashlib.sha256(f"{self.kind}|{self.seed}|{self.D}|{self.c}|{self.n}".encode())
        for k in sorted(self._params):
            h.update(self._params[k].tobytes())
        if self.table is not None:
            for k in sorted(self.table):
                h.update(struct.pack("<I", k))
                h.update(np.asarray(self.table[k], dtype="<f4").tobytes())
        return h.hexdigest()

    def __call__(self, images: np.ndarray, centers=None) -> np.ndarray:
        """Batch extraction: (N, c, n, n) -> (N, D)."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4:
            raise DimensionMismatch(f"expected (N, c, n, n) images, got {images.shape}")
        if self.kind == "precomputed":
            if centers is None:
                raise ValueError("precomputed extractor needs centre facet ids")
            try:
                return np.stack([np.asarray(self.table[int(c)], dtype=np.float64) for c in centers])
            except KeyError as e:
                raise DimensionMismatch(f"no precomputed feature for facet {e.args[0]}")
        if images.shape[1:] != (self.c, self.n, self.n):
            raise DimensionMismatch(
                f"extractor built for {(self.c, self.n, self.n)}, got images {images.shape[1:]}"
            )
        if self.kind == "identity-pool":
            flat = images.reshape(len(images), -1)
            edges = (np.arange(self.D + 1) * flat.shape[1]) // self.D
            sums = np.add.reduceat(flat, edges[:-1], axis=1)
            return sums / np.diff(edges)
        win = sliding_window_view(images, (CONV_SIZE, CONV_SIZE), axis=(2, 3))
        conv = np.einsum("ncijkl,fckl->nfij", win, self._params["filters"], optimize=True)
        conv += self._params["bias"][None, :, None, None]
        act = np.maximum(conv, 0.0)
        pooled = np.concatenate([act.mean(axis=(2, 3)), act.max(axis=(2, 3))], axis=1)
        return pooled @ self._params["proj"]


def extract_feature(img, ex: Extractor) -> FeatureVector:
    """Feature vector of a single :class:`~texseg.patches.PatchImage`."""
    channels = np.asarray(img.channels)
    if not np.isfinite(channels).all():
        raise ValueError("patch image has non-finite entries")
    vals = ex(channels[None], centers=[img.center])[0]
    return FeatureVector(values=vals, center=int(img.center))


# ---------------------------------------------------------------------------
# tokens


def positional_encoding(n_k: int, d: int) -> np.ndarray:
    pos = np.arange(n_k)[:, None]
    i = np.arange(d)[None, :]
    rate = 1.0 / np.power(10000.0, (2 * (i // 2)) / d)
    ang = pos * rate
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))


@dataclass(frozen=True)
class TokenConfig:
    n_k: int = 16
    d: int | None = None
    positional: bool = True


def tokenize_matrix(features: np.ndarray, n_k: int = 16, positional: bool = True,
                    d: int | None = None) -> np.ndarray:
    """(N, D) -> (N, n_k, D / n_k), with sinusoidal position codes added."""
    features = np.asarray(features)
    D = features.shape[-1]
    if n_k < 1 or D % n_k:
        raise IndivisibleDimension(f"sequence length {n_k} does not divide feature dimension {D}")
    dd = D // n_k
    if d is not None and d != dd:
        raise IndivisibleDimension(f"n_k={n_k} and d={d} do not multiply to D={D}")
    tokens = features.reshape(*features.shape[:-1], n_k, dd).astype(np.float64)
    if positional:
        tokens = tokens + positional_encoding(n_k, dd)
    return tokens


def tokenize(f: FeatureVector, cfg: TokenConfig = TokenConfig()) -> TokenSequence:
    toks = tokenize_matrix(f.values, cfg.n_k, cfg.positional, cfg.d)
    return TokenSequence(tokens=toks, center=f.center)


def detokenize(seq: TokenSequence, positional: bool = False) -> FeatureVector:
    toks = seq.tokens
    if positional:
        toks = toks - positional_encoding(*toks.shape)
    return FeatureVector(values=toks.reshape(-1).copy(), center=seq.center)


# ---------------------------------------------------------------------------
# feature files


def ids_path(path) -> str:
    return os.fspath(path) + ".ids"


def write_features(path, features, ids=None) -> None:
    """Write an (N, D) float32 matrix and its facet-id column file."""
    if isinstance(features, (list, tuple)) and features and isinstance(features[0], FeatureVector):
        ids = [f.center for f in features] if ids is None else ids
        features = np.stack([f.values for f in features])
    mat = np.asarray(features, dtype="<f4")
    if mat.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D feature matrix, got {mat.shape}")
    ids = np.arange(len(mat)) if ids is None else np.asarray(ids)
    if len(ids) != len(mat):
        raise DimensionMismatch(f"{len(ids)} ids for {len(mat)} feature rows")
    with open(path, "wb") as fh:
        fh.write(binfmt.header(binfmt.FEATURE_VERSION))
        fh.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
        fh.write(mat.tobytes())
    with open(ids_path(path), "wb") as fh:
        fh.write(np.asarray(ids, dtype="<u4").tobytes())


def read_feature_matrix(path):
    r = binfmt.open_reader(path, binfmt.FEATURE_VERSION)
    num, dim = r.unpack("II")
    need = num * dim * 4
    if r.remaining < need:
        rows = r.remaining // (4 * dim) if dim else 0
        raise TruncatedFile(f"{path}: header promises {num} rows of {dim}, found {rows}")
    mat = r.f32(num * dim).reshape(num, dim)
    ip = ids_path(path)
    if os.path.exists(ip):
        ids = np.fromfile(ip, dtype="<u4").astype(np.int64)
        if len(ids) != num:
            raise TruncatedFile(f"{ip}: {len(ids)} ids for {num} rows")
    else:
        ids = np.arange(num)
    return ids, mat


def load_features(path) -> list:
    ids, mat = read_feature_matrix(path)
    return [FeatureVector(values=row.copy(), center=int(i)) for i, row in zip(ids, mat)]
