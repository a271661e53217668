"""Single-stage training loop and evaluation.

One stage = cross-entropy (plus the L1 gate penalty during sparsity
training) optimized by AdamW under a cosine schedule. Runs are
deterministic per (config, seed): batch order comes from a dedicated
generator and every arithmetic step is 64-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset, ImageSplit
from .errors import ConfigError, NumericalError, StateError
from .model import VitModel, forward
from .optim import AdamW, cosine_lr
from .tensor import Graph, add, backward, cross_entropy, l1_penalty, no_grad

STAGES = ("baseline", "sparsity", "finetune")


@dataclass(frozen=True)
class TrainConfig:
    """One stage's optimization settings."""

    stage: str
    epochs: int
    batch_size: int
    base_lr: float
    min_lr: float
    weight_decay: float
    l1_lambda: float = 0.0
    seed: int = 0
    eval_every: int = 50

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.base_lr < 0 or self.min_lr < 0 or self.min_lr > self.base_lr:
            raise ConfigError(
                f"need 0 <= min_lr <= base_lr, got {self.min_lr}, {self.base_lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if (self.stage == "sparsity") != (self.l1_lambda > 0):
            raise ConfigError(
                "l1_lambda must be > 0 exactly when stage == 'sparsity', got "
                f"stage={self.stage!r} l1_lambda={self.l1_lambda}")


@dataclass(frozen=True)
class MetricRecord:
    """One eval point; ``gate_median_abs`` is NaN for gate-free models."""

    step: int
    lr: float
    loss: float
    eval_acc: float
    gate_median_abs: float

    def format(self) -> str:
        return (f"step={self.step} lr={self.lr!r} loss={self.loss!r} "
                f"eval_acc={self.eval_acc!r} gate_median_abs={self.gate_median_abs!r}")


def parse_metric_line(line: str) -> MetricRecord:
    fields = dict(item.split("=", 1) for item in line.split())
    return MetricRecord(step=int(fields["step"]), lr=float(fields["lr"]),
                        loss=float(fields["loss"]),
                        eval_acc=float(fields["eval_acc"]),
                        gate_median_abs=float(fields["gate_median_abs"]))


def gate_median_abs(model: VitModel) -> float:
    if model.mode != "soft":
        return float("nan")
    mags = np.concatenate([np.abs(g.scores.data) for g in model.gate_vectors()])
    return float(np.median(mags))


def evaluate(model: VitModel, split: ImageSplit, batch_size: int = 64) -> float:
    """Top-1 accuracy; stateless and invariant to the batching."""
    correct = 0
    with no_grad():
        for start in range(0, len(split), batch_size):
            images = split.images[start:start + batch_size]
            labels = split.labels[start:start + batch_size]
            logits = forward(model, images)
            correct += int((np.argmax(logits.data, axis=1) == labels).sum())
    return correct / len(split)


def train(model: VitModel, dataset: Dataset, cfg: TrainConfig,
          step_offset: int = 0) -> tuple[VitModel, list[MetricRecord]]:
    """Run one stage in place; returns the model and its metric history."""
    if cfg.stage in ("baseline", "sparsity") and model.mode != "soft":
        raise StateError(f"{cfg.stage} training requires a soft (gated) model")
    if cfg.stage == "finetune" and model.mode != "hard":
        raise StateError("finetune training requires a hard-pruned model")

    params = model.named_parameters()
    optimizer = AdamW([(n, t, d) for n, t, d in params],
                      weight_decay=cfg.weight_decay)
    gates = [g.scores for g in model.gate_vectors()]
    n_train = len(dataset.train)
    steps_per_epoch = math.ceil(n_train / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    order_rng = np.random.default_rng(cfg.seed)

    history: list[MetricRecord] = []
    step = 0
    for _ in range(cfg.epochs):
        order = order_rng.permutation(n_train)
        for start in range(0, n_train, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            images = dataset.train.images[batch]
            labels = dataset.train.labels[batch]
            lr_now = cosine_lr(step, total_steps, cfg.base_lr, cfg.min_lr)
            with Graph() as graph:
                logits = forward(model, images)
                loss = cross_entropy(logits, labels)
                if cfg.l1_lambda > 0:
                    loss = add(loss, l1_penalty(gates, cfg.l1_lambda))
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise NumericalError(
                    f"non-finite loss at step={step_offset + step + 1} "
                    f"lr={lr_now!r} loss={loss_value!r}")
            backward(loss, graph)
            optimizer.step(lr_now)
            optimizer.zero_grad()
            step += 1
            if step % cfg.eval_every == 0 or step == total_steps:
                history.append(MetricRecord(
                    step=step_offset + step, lr=lr_now, loss=loss_value,
                    eval_acc=evaluate(model, dataset.eval),
                    gate_median_abs=gate_median_abs(model)))
    return model, history
