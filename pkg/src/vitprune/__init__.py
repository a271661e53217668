"""Structured pruning of vision transformers via learnable dimension gates."""

from .checkpoint import LoadedCheckpoint, load_checkpoint, save_checkpoint
from .cost import (CostReport, build_cost_report, count_flops, count_params,
                   parse_kv, report_to_kv, report_to_table)
from .data import Dataset, ImageSplit, SyntheticDatasetSpec, make_dataset
from .errors import (CheckpointError, ConfigError, DimensionError,
                     NumericalError, StateError, UsageError, VitPruneError)
from .estimator import (PrunedVisionTransformerClassifier,
                        VisionTransformerClassifier)
from .model import (GATE_POSITIONS, PRESETS, GateSite, GateVector,
                    ModelConfig, VitModel, attention, forward, init_model)
from .optim import AdamW, OptimizerState, cosine_lr
from .pipeline import ARTIFACTS, PipelineResult, run_pipeline
from .pruning import (PruneMask, PrunePlan, ScoreEntry, apply_plan, binarize,
                      build_plan, collect_scores, compute_threshold,
                      resolve_ties)
from .tensor import Graph, Tensor, backward, mac_tally, no_grad
from .train import MetricRecord, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AdamW", "ARTIFACTS", "CheckpointError", "ConfigError", "CostReport",
    "Dataset", "DimensionError", "GATE_POSITIONS", "GateSite", "GateVector",
    "Graph", "ImageSplit", "LoadedCheckpoint", "MetricRecord", "ModelConfig",
    "NumericalError", "OptimizerState", "PRESETS", "PipelineResult",
    "PruneMask", "PrunePlan", "PrunedVisionTransformerClassifier",
    "ScoreEntry", "StateError", "SyntheticDatasetSpec", "Tensor",
    "TrainConfig", "UsageError", "VisionTransformerClassifier", "VitModel",
    "VitPruneError", "apply_plan", "attention", "backward", "binarize",
    "build_cost_report", "build_plan", "collect_scores", "compute_threshold",
    "cosine_lr", "count_flops", "count_params", "evaluate", "forward",
    "init_model", "load_checkpoint", "mac_tally", "make_dataset", "no_grad",
    "parse_kv", "report_to_kv", "report_to_table", "resolve_ties",
    "run_pipeline", "save_checkpoint", "train",
]
