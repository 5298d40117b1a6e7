"""Hierarchical graph masked autoencoders: multi-scale coarsening, coarse-to-fine
masking with gradual recovery, a fine/coarse encoder-decoder and a linear probe."""

from .config import RunConfig, load_config
from .graph import Graph, GraphDataset, degree_features, load_jsonl, load_tu_dataset
from .hierarchy import Assignment, Hierarchy, build_hierarchy, coarsen_adjacency, pool, unpool
from .masking import MaskPlan, RecoverySchedule, build_mask_plan, recovery_count
from .model import FiCoModel
from .training import Checkpoint, embed, pretrain, probe

__version__ = "0.1.0"

__all__ = [
    "Assignment", "Checkpoint", "FiCoModel", "Graph", "GraphDataset", "Hierarchy", "MaskPlan",
    "RecoverySchedule", "RunConfig", "build_hierarchy", "build_mask_plan", "coarsen_adjacency",
    "degree_features", "embed", "load_config", "load_jsonl", "load_tu_dataset", "pool", "pretrain",
    "probe", "recovery_count", "unpool",
]
