"""Collaborative adapter development at desk scale: branch contributors
train low-rank plugin adapters and distilled datasets on private tasks,
then merge them asynchronously into a shared main-branch model."""

from .datasets import LabeledDataset, TaskSpec, generate_tasks, split_by_group
from .distill import DistillConfig, DistilledDataset, DsaParams, eval_distilled
from .distill import distill as distill_dataset
from .evaluation import MetricsReport, accuracy, auc, group_aggregate
from .merge import (
    CoeffOptimConfig,
    ForgeItem,
    MergeCoefficients,
    baseline_lorahub,
    baseline_modelsoup,
    fuse,
    merge_round_fusion,
    merge_round_mixture,
    mixture_forward,
    optimize_coefficients,
)
from .model import (
    BaseEncoder,
    LabelEmbeddingTable,
    LoraAdapter,
    PluginModule,
    TrainConfig,
    classify,
    forward,
    init_adapter,
    train_plugin,
)
from .numerics import SgdState, Tensor, finite_difference_grad, make_rng, sgd_step
from .registry import BranchContribution, Commit, Repository, init_repo

__version__ = "0.1.0"

__all__ = [
    "BaseEncoder", "BranchContribution", "CoeffOptimConfig", "Commit",
    "DistillConfig", "DistilledDataset", "DsaParams", "ForgeItem",
    "LabelEmbeddingTable", "LabeledDataset", "LoraAdapter", "MergeCoefficients",
    "MetricsReport", "PluginModule", "Repository", "SgdState", "TaskSpec",
    "Tensor", "TrainConfig", "accuracy", "auc", "baseline_lorahub",
    "baseline_modelsoup", "classify", "distill_dataset", "eval_distilled",
    "finite_difference_grad", "forward", "fuse", "generate_tasks",
    "group_aggregate", "init_adapter", "init_repo", "make_rng",
    "merge_round_fusion", "merge_round_mixture", "mixture_forward",
    "optimize_coefficients", "sgd_step", "split_by_group", "train_plugin",
]
