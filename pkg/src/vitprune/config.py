"""YAML run configuration: sections model, data, train_baseline,
train_sparsity, prune, finetune.

Every key has a documented default; unknown keys are rejected. Keys match
the owning dataclass fields (the sparsity L1 coefficient is spelled
``lambda`` in the file). Whenever a default is used it is echoed to the
run log so the effective configuration is always visible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import yaml

from .data import SyntheticDatasetSpec
from .errors import ConfigError
from .model import ModelConfig
from .train import TrainConfig

# Calibrated on the synthetic task: smallest coefficient giving a clear
# (>= 2x) median-magnitude separation between eventual kept and pruned sets.
DEFAULT_SPARSITY_LAMBDA = 1e-3

_MODEL_DEFAULTS = {
    "image_size": 16, "patch_size": 4, "in_channels": 3, "embed_dim": 64,
    "num_layers": 4, "num_heads": 4, "mlp_ratio": 4, "num_classes": 10,
}
_DATA_DEFAULTS = {
    "num_classes": 10, "train_per_class": 200, "eval_per_class": 50,
    "image_size": 16, "in_channels": 3, "noise_std": 2.5, "seed": 7,
}
_BASELINE_DEFAULTS = {
    "epochs": 16, "batch_size": 50, "base_lr": 1e-3, "min_lr": 1e-5,
    "weight_decay": 0.05, "seed": 1, "eval_every": 200,
}
# L1 shrinkage under the adaptive optimizer moves at ~lr per step once the
# penalty dominates, so the sparsity stage needs the longest schedule.
_SPARSITY_DEFAULTS = {
    "epochs": 24, "batch_size": 50, "base_lr": 1.5e-3, "min_lr": 1e-5,
    "weight_decay": 0.05, "lambda": DEFAULT_SPARSITY_LAMBDA, "seed": 1,
    "eval_every": 200,
}
# Fine-tuning keeps the sparsity optimization settings at a 10x smaller rate.
_FINETUNE_DEFAULTS = {
    "epochs": 8, "batch_size": 50, "base_lr": 1.5e-4, "min_lr": 1e-6,
    "weight_decay": 0.05, "seed": 1, "eval_every": 200,
}
_PRUNE_DEFAULTS = {"rate": 0.4}

_SECTIONS = {
    "model": _MODEL_DEFAULTS,
    "data": _DATA_DEFAULTS,
    "train_baseline": _BASELINE_DEFAULTS,
    "train_sparsity": _SPARSITY_DEFAULTS,
    "prune": _PRUNE_DEFAULTS,
    "finetune": _FINETUNE_DEFAULTS,
}


@dataclass
class RunConfig:
    """Fully resolved configuration for one pipeline run."""

    model: ModelConfig
    data: SyntheticDatasetSpec
    train_baseline: TrainConfig
    train_sparsity: TrainConfig
    finetune: TrainConfig
    prune_rate: float


def _resolve_section(name: str, raw: dict, log: Callable[[str], None]) -> dict:
    defaults = _SECTIONS[name]
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown key(s) in section '{name}': {', '.join(unknown)}")
    resolved = {}
    for key, default in defaults.items():
        if key in raw:
            resolved[key] = raw[key]
        else:
            resolved[key] = default
            log(f"config: using default {name}.{key}={default}")
    return resolved


def _train_config(stage: str, section: dict) -> TrainConfig:
    kwargs = dict(section)
    lam = kwargs.pop("lambda", 0.0)
    return TrainConfig(stage=stage, l1_lambda=lam, **kwargs)


def load_run_config(path: str, log: Callable[[str], None] = lambda _: None,
                    seed_override: int | None = None) -> RunConfig:
    """Parse, validate, and resolve a YAML config file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path!r}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path!r} is not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping of sections, got "
                          f"{type(raw).__name__}")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    sections = {}
    for name in _SECTIONS:
        body = raw.get(name, {})
        if body is None:
            body = {}
        if not isinstance(body, dict):
            raise ConfigError(f"section '{name}' must be a mapping")
        sections[name] = _resolve_section(name, body, log)

    if seed_override is not None:
        for name in ("train_baseline", "train_sparsity", "finetune"):
            sections[name]["seed"] = seed_override
            log(f"config: seed override {name}.seed={seed_override}")

    try:
        model = ModelConfig(**sections["model"])
        data = SyntheticDatasetSpec(**sections["data"])
        baseline = _train_config("baseline", sections["train_baseline"])
        sparsity = _train_config("sparsity", sections["train_sparsity"])
        finetune = _train_config("finetune", sections["finetune"])
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    rate = sections["prune"]["rate"]
    if not isinstance(rate, (int, float)) or not 0.0 <= rate < 1.0:
        raise ConfigError(f"prune.rate must lie in [0, 1), got {rate!r}")

    for key in ("num_classes", "image_size", "in_channels"):
        if getattr(model, key) != getattr(data, key):
            raise ConfigError(
                f"model.{key}={getattr(model, key)} disagrees with "
                f"data.{key}={getattr(data, key)}")
    return RunConfig(model=model, data=data, train_baseline=baseline,
                     train_sparsity=sparsity, finetune=finetune,
                     prune_rate=float(rate))
