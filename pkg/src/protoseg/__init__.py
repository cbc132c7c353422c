"""Nonparametric prototype classification with online balanced clustering."""

from .baselines import ParametricHead, head_posterior, param_count, unified_posterior
from .clustering import Assignment, cluster_batch_by_class, harden, sinkhorn_assign
from .embedding import (
    DistanceMeasure,
    class_posterior,
    classify,
    distance,
    l2_normalize,
    pixel_class_distances,
)
from .encoder import MlpEncoder, SgdConfig
from .losses import LossBreakdown, LossWeights, loss_ce, loss_ppc, loss_ppd, loss_total
from .prototypes import PrototypeBank
from .trainer import HyperParams, TrainConfig, evaluate, train, train_iteration

__version__ = "0.1.0"

__all__ = [
    "Assignment", "DistanceMeasure", "HyperParams", "LossBreakdown", "LossWeights", "MlpEncoder",
    "ParametricHead", "PrototypeBank", "SgdConfig", "TrainConfig", "class_posterior", "classify",
    "cluster_batch_by_class", "distance", "evaluate", "harden", "head_posterior", "l2_normalize",
    "loss_ce", "loss_ppc", "loss_ppd", "loss_total", "param_count", "pixel_class_distances",
    "sinkhorn_assign", "train", "train_iteration", "unified_posterior",
]
