"""Unsupervised segmentation of geometric texture on triangle meshes."""

from .evaluation import SynthSpec, baseline_segment, confusion, emit_report, metrics, synth_textured_mesh
from .labels import LabelState, read_labels, write_labels
from .mesh import Mesh, build_adjacency, load_mesh, write_labeled_ply, write_obj, write_ply
from .patches import PatchConfig, extract_patches
from .pipeline import FeatureConfig, prepare, segment
from .trainer import TrainConfig, convergence_check, ipc_filter, run_ablation, run_algorithm1

__version__ = "0.1.0"
