"""End-to-end wiring: mesh to patch images, features, tokens and facet labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import Extractor, tokenize_matrix
from .labels import LabelState
from .mesh import Mesh, build_adjacency
from .models import EXCLUDED
from .patches import PatchConfig, extract_patches
from .trainer import TrainConfig, run_ablation


@dataclass(frozen=True)
class FeatureConfig:
    kind: str = "fixed-projection"
    seed: int = 0
    D: int = 256
    n_k: int = 16
    positional: bool = True


@dataclass(eq=False)
class Prepared:
    """Per-patch data for the interior facets of one mesh."""

    mesh: Mesh
    centers: np.ndarray
    images: np.ndarray | None
    features: np.ndarray
    tokens: np.ndarray


def prepare(mesh: Mesh, patch_cfg: PatchConfig = PatchConfig(), feat_cfg: FeatureConfig = FeatureConfig(),
            extractor: Extractor | None = None, progress=None) -> Prepared:
    adj = build_adjacency(mesh)
    centers, images = extract_patches(mesh, adj, patch_cfg, progress=progress)
    if extractor is None:
        extractor = Extractor(feat_cfg.kind, seed=feat_cfg.seed, D=feat_cfg.D,
                              c=len(patch_cfg.channel_ids), n=patch_cfg.n)
    feats = extractor(images, centers=centers) if len(centers) else np.zeros((0, extractor.D))
    return Prepared(mesh, centers, images, feats, tokenize_matrix(feats, feat_cfg.n_k, feat_cfg.positional))


def prepare_from_features(mesh: Mesh, centers, features, feat_cfg: FeatureConfig = FeatureConfig()) -> Prepared:
    """Skip patch extraction and use externally computed per-facet features."""
    feats = np.asarray(features, dtype=np.float64)
    return Prepared(mesh, np.asarray(centers, dtype=np.int64), None, feats,
                    tokenize_matrix(feats, feat_cfg.n_k, feat_cfg.positional))


def to_facets(prep: Prepared, instance_labels) -> LabelState:
    """Scatter per-patch labels onto all facets; facets without a patch get -1."""
    lab = np.full(prep.mesh.facet_count, EXCLUDED, dtype=np.int8)
    src = np.asarray(getattr(instance_labels, "labels", instance_labels), dtype=np.int8)
    lab[prep.centers] = src
    state = LabelState(lab)
    if isinstance(instance_labels, LabelState):
        state.history = instance_labels.history
        state.iteration = instance_labels.iteration
        state.audit = instance_labels.audit
        state.trace = instance_labels.trace
        state.models = instance_labels.models
    return state


def segment(prep: Prepared, cfg: TrainConfig = TrainConfig(), variant: str = "full",
            progress=None) -> LabelState:
    return to_facets(prep, run_ablation(variant, prep.tokens, cfg, progress))
