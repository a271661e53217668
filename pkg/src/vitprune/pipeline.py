"""The three-stage compression pipeline on the synthetic task.

Stage 1 trains a baseline and then continues with L1-regularized gates
(sparsity training). Stage 2 ranks all gate magnitudes, slices the model
at the requested rate, and writes the cost report. Stage 3 fine-tunes the
sliced model without the L1 term. Every stage leaves a checkpoint, so a
run can resume from any completed boundary.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

from .checkpoint import load_checkpoint, save_checkpoint
from .cost import CostReport, build_cost_report, report_to_kv, report_to_table
from .data import Dataset, SyntheticDatasetSpec, make_dataset
from .errors import ConfigError
from .model import ModelConfig, VitModel, init_model
from .pruning import apply_plan, build_plan
from .train import MetricRecord, TrainConfig, evaluate, train

ARTIFACTS = ("baseline.ckpt", "sparse.ckpt", "pruned.ckpt", "final.ckpt",
             "report.txt", "report.kv", "metrics.log")


@dataclass
class PipelineResult:
    """Final hard model plus the evidence gathered along the way."""

    model: VitModel
    report: CostReport
    metrics: list[MetricRecord]
    baseline_eval_acc: float
    sparsity_eval_acc: float
    pruned_eval_acc: float
    final_eval_acc: float


def _total_steps(cfg: TrainConfig, n_train: int) -> int:
    return cfg.epochs * math.ceil(n_train / cfg.batch_size)


def _append_metrics(path: str, records: list[MetricRecord]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for record in records:
            fh.write(record.format() + "\n")


def run_pipeline(model_cfg: ModelConfig, data_spec: SyntheticDatasetSpec,
                 base_cfg: TrainConfig, sparsity_cfg: TrainConfig,
                 finetune_cfg: TrainConfig, rate: float, out_dir: str,
                 resume: bool = False,
                 dataset: Dataset | None = None) -> PipelineResult:
    """Run (or resume) all three stages, leaving the seven artifacts in
    ``out_dir``: baseline.ckpt, sparse.ckpt, pruned.ckpt, final.ckpt,
    report.txt, report.kv, metrics.log."""
    if base_cfg.stage != "baseline" or sparsity_cfg.stage != "sparsity" \
            or finetune_cfg.stage != "finetune":
        raise ConfigError(
            "run_pipeline expects configs staged baseline/sparsity/finetune, got "
            f"{base_cfg.stage}/{sparsity_cfg.stage}/{finetune_cfg.stage}")
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"pruning rate must lie in [0, 1), got {rate}")
    os.makedirs(out_dir, exist_ok=True)
    paths = {name: os.path.join(out_dir, name) for name in ARTIFACTS}
    if dataset is None:
        dataset = make_dataset(data_spec)
    n_train = len(dataset.train)
    metrics: list[MetricRecord] = []
    if not resume or not os.path.exists(paths["metrics.log"]):
        open(paths["metrics.log"], "w", encoding="utf-8").close()

    # Stage 1a: baseline classification training.
    if resume and os.path.exists(paths["baseline.ckpt"]):
        model = load_checkpoint(paths["baseline.ckpt"]).model
    else:
        model = init_model(model_cfg, base_cfg.seed)
        model, records = train(model, dataset, base_cfg)
        metrics.extend(records)
        _append_metrics(paths["metrics.log"], records)
        save_checkpoint(model, paths["baseline.ckpt"], stage="baseline")
    baseline_acc = evaluate(model, dataset.eval)

    # Stage 1b: joint weight + gate training with the L1 penalty.
    offset = _total_steps(base_cfg, n_train)
    if resume and os.path.exists(paths["sparse.ckpt"]):
        model = load_checkpoint(paths["sparse.ckpt"]).model
    else:
        model, records = train(model, dataset, sparsity_cfg, step_offset=offset)
        metrics.extend(records)
        _append_metrics(paths["metrics.log"], records)
        save_checkpoint(model, paths["sparse.ckpt"], stage="sparsity")
    sparsity_acc = evaluate(model, dataset.eval)

    # Stage 2: global-threshold slicing and the cost report.
    gate_params = sum(g.scores.data.size for g in model.gate_vectors())
    plan = build_plan(model, rate)
    hard = apply_plan(model, plan)
    report = build_cost_report(model_cfg, plan, gate_params_removed=gate_params)
    save_checkpoint(hard, paths["pruned.ckpt"], stage="pruned")
    _write_text(paths["report.txt"], report_to_table(report))
    _write_text(paths["report.kv"], report_to_kv(report))
    pruned_acc = evaluate(hard, dataset.eval)

    # Stage 3: fine-tune the sliced model without the L1 term.
    offset += _total_steps(sparsity_cfg, n_train)
    hard, records = train(hard, dataset, finetune_cfg, step_offset=offset)
    metrics.extend(records)
    _append_metrics(paths["metrics.log"], records)
    save_checkpoint(hard, paths["final.ckpt"], stage="finetune")
    final_acc = evaluate(hard, dataset.eval)

    return PipelineResult(model=hard, report=report, metrics=metrics,
                          baseline_eval_acc=baseline_acc,
                          sparsity_eval_acc=sparsity_acc,
                          pruned_eval_acc=pruned_acc,
                          final_eval_acc=final_acc)


def _write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)
