"""Multi-exit convolutional networks.

Attach lightweight classifier heads to the stage boundaries of a small
ConvNet, train all of them jointly with per-exit loss weights, predict by
fusing the raw exit logits with per-exit output weights, then exhaustively
search exit subsets to extract a cheaper sub-network that keeps (or beats)
the fused accuracy.
"""

from .backbones import (
    Backbone,
    BackboneSpec,
    build_backbone,
    register_backbone,
    register_external_backbone,
    registered_backbones,
)
from .costs import (
    CostReport,
    LatencyResult,
    cost_report,
    count_macs,
    count_params,
    measure_latency,
    percent_change,
)
from .data import ArraySplit, DatasetSpec, dataset_spec, load_dataset
from .experiment import ExperimentConfig, RunStore, run_experiment
from .inference import (
    LogitDump,
    collect_logits,
    ensemble_logits,
    ensemble_top1,
    per_exit_accuracies,
    predict,
    top1_accuracy,
)
from .model import (
    ExitHead,
    ExitMask,
    MultiExitModel,
    attach_exits,
    extract_subnetwork,
    forward_all_exits,
    load_checkpoint,
    make_exit_head,
    save_checkpoint,
    spread_exit_indices,
)
from .pruning import MaskEvaluation, PruneReport, enumerate_masks, evaluate_mask, select_best
from .report import Report, build_report
from .training import TrainConfig, TrainHistory, cce_loss, evaluate_loss, train_joint, weighted_total_loss
from .weights import ExitWeights, WeightMode, linear_ramp, make_weights, restrict_weights

__version__ = "0.1.0"

__all__ = [
    "ArraySplit",
    "Backbone",
    "BackboneSpec",
    "CostReport",
    "DatasetSpec",
    "ExitHead",
    "ExitMask",
    "ExitWeights",
    "ExperimentConfig",
    "LatencyResult",
    "LogitDump",
    "MaskEvaluation",
    "MultiExitModel",
    "PruneReport",
    "Report",
    "RunStore",
    "TrainConfig",
    "TrainHistory",
    "WeightMode",
    "attach_exits",
    "build_backbone",
    "build_report",
    "cce_loss",
    "collect_logits",
    "cost_report",
    "count_macs",
    "count_params",
    "dataset_spec",
    "ensemble_logits",
    "ensemble_top1",
    "enumerate_masks",
    "evaluate_loss",
    "evaluate_mask",
    "extract_subnetwork",
    "forward_all_exits",
    "linear_ramp",
    "load_checkpoint",
    "load_dataset",
    "make_exit_head",
    "make_weights",
    "measure_latency",
    "per_exit_accuracies",
    "percent_change",
    "predict",
    "register_backbone",
    "register_external_backbone",
    "registered_backbones",
    "restrict_weights",
    "run_experiment",
    "save_checkpoint",
    "select_best",
    "spread_exit_indices",
    "top1_accuracy",
    "train_joint",
    "weighted_total_loss",
]
