"""Sparse complementary fusion of model checkpoints with reverse-KL saliency."""

from .baselines import (
    METHODS as BASELINE_METHODS,
    BaselineConfig,
    dare_prune,
    merge_checkpoint,
    sce_merge,
    task_arithmetic,
    ties_merge,
)
from .checkpoint_io import TensorEntry, TensorMap, align, load_checkpoint, save_checkpoint
from .fusion import (
    FusionConfig,
    build_mask,
    fuse_checkpoint,
    fuse_tensor,
    importance,
    iqr_threshold,
    reverse_kl,
    stable_softmax,
)

__version__ = "0.1.0"

__all__ = [
    "BASELINE_METHODS",
    "BaselineConfig",
    "FusionConfig",
    "TensorEntry",
    "TensorMap",
    "align",
    "build_mask",
    "dare_prune",
    "fuse_checkpoint",
    "fuse_tensor",
    "importance",
    "iqr_threshold",
    "load_checkpoint",
    "merge_checkpoint",
    "reverse_kl",
    "save_checkpoint",
    "sce_merge",
    "stable_softmax",
    "task_arithmetic",
    "ties_merge",
]
