"""Adaptive logit adjustment losses for long-tailed classification."""

from .data import (
    Dataset,
    LongTailSpec,
    SubsetPartition,
    class_counts,
    generate,
    load_dataset,
    partition_by_count,
    save_dataset,
)
from .losses import (
    AdjustingTerm,
    LossKind,
    LossSpec,
    ala_adjust,
    ala_loss,
    ce_loss,
    compute_loss,
    difficulty_factor,
    focal_loss,
    la_loss,
    ldam_adjust,
    quantity_factor,
)
from .metrics import MetricsReport, report
from .model import CosineClassifier, backward, forward, init_classifier
from .train import TraceLog, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "LongTailSpec",
    "SubsetPartition",
    "class_counts",
    "generate",
    "load_dataset",
    "partition_by_count",
    "save_dataset",
    "AdjustingTerm",
    "LossKind",
    "LossSpec",
    "ala_adjust",
    "ala_loss",
    "ce_loss",
    "compute_loss",
    "difficulty_factor",
    "focal_loss",
    "la_loss",
    "ldam_adjust",
    "quantity_factor",
    "MetricsReport",
    "report",
    "CosineClassifier",
    "backward",
    "forward",
    "init_classifier",
    "TraceLog",
    "TrainConfig",
    "evaluate",
    "train",
]
