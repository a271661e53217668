"""Command-line interface: train / prune / analyze / pipeline.

Exit codes: 0 success, 1 configuration error, 2 checkpoint error,
3 numerical abort. Failures print a single machine-parsable line to
stderr of the form ``vitprune: error kind=<kind> msg="..."``. All outputs
are deterministic given (config, seed, inputs); files are written via
temp-file-plus-rename so no partial artifact is ever left behind.
"""

from __future__ import annotations

import argparse
import os
import sys

from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_run_config
from .cost import build_cost_report, report_to_kv, report_to_table
from .data import make_dataset
from .errors import (CheckpointError, ConfigError, NumericalError,
                     VitPruneError)
from .model import PRESETS, init_model
from .pipeline import run_pipeline
from .pruning import apply_plan, build_plan, plan_from_keep_indices
from .train import train

_EXIT_CODES = {
    "config": 1,
    "checkpoint": 2,
    "numerical": 3,
}


def _fail(kind: str, message: str) -> int:
    print(f'vitprune: error kind={kind} msg="{message}"', file=sys.stderr)
    return _EXIT_CODES[kind]


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _stage_config(run_cfg, stage: str):
    return {"baseline": run_cfg.train_baseline,
            "sparsity": run_cfg.train_sparsity,
            "finetune": run_cfg.finetune}[stage]


def cmd_train(args) -> int:
    run_cfg = load_run_config(args.config, log=_log, seed_override=args.seed)
    cfg = _stage_config(run_cfg, args.stage)
    if args.stage in ("sparsity", "finetune") and args.in_path is None:
        raise ConfigError(f"--in is required for stage {args.stage}")
    if args.stage == "baseline":
        model = init_model(run_cfg.model, cfg.seed)
    else:
        loaded = load_checkpoint(args.in_path)
        model = loaded.model
        if args.stage == "sparsity" and model.mode != "soft":
            raise CheckpointError(
                "sparsity training needs a soft (gated) checkpoint, got "
                f"mode={model.mode} stage={loaded.stage}")
        if args.stage == "finetune" and model.mode != "hard":
            raise CheckpointError(
                "finetune training needs a hard (pruned) checkpoint, got "
                f"mode={model.mode} stage={loaded.stage}")
        if model.config != run_cfg.model:
            raise CheckpointError(
                "checkpoint architecture does not match the config file")
    dataset = make_dataset(run_cfg.data)
    model, records = train(model, dataset, cfg)
    save_checkpoint(model, args.out, stage=args.stage)
    metrics_path = args.metrics or os.path.splitext(args.out)[0] + ".metrics.log"
    with open(metrics_path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record.format() + "\n")
    _log(f"stage {args.stage} complete: wrote {args.out} and {metrics_path}")
    return 0


def cmd_prune(args) -> int:
    run_cfg = load_run_config(args.config, log=_log)
    if not 0.0 <= args.rate < 1.0:
        raise ConfigError(f"--rate must lie in [0, 1), got {args.rate}")
    loaded = load_checkpoint(args.in_path)
    model = loaded.model
    if model.mode != "soft":
        raise CheckpointError(
            f"pruning needs a soft (gated) checkpoint, got mode={model.mode}")
    if model.config != run_cfg.model:
        raise CheckpointError(
            "checkpoint architecture does not match the config file")
    if loaded.stage == "baseline":
        _log("warning: pruning a baseline-stage checkpoint "
             "(gates are at initialization)")
    gate_params = sum(g.scores.data.size for g in model.gate_vectors())
    plan = build_plan(model, args.rate)
    hard = apply_plan(model, plan)
    report = build_cost_report(run_cfg.model, plan,
                               gate_params_removed=gate_params)
    save_checkpoint(hard, args.out, stage="pruned")
    base = _report_base(args.report)
    _write_atomic(base + ".txt", report_to_table(report))
    _write_atomic(base + ".kv", report_to_kv(report))
    _log(f"pruned at rate {args.rate}: achieved_rate={plan.achieved_rate!r} "
         f"tau={plan.tau!r}")
    return 0


def _report_base(path: str) -> str:
    root, ext = os.path.splitext(path)
    return root if ext in (".txt", ".kv") else path


def _write_atomic(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def cmd_analyze(args) -> int:
    plan = None
    if args.in_path is not None:
        loaded = load_checkpoint(args.in_path)
        config = loaded.model.config
        if loaded.model.mode == "hard":
            plan = plan_from_keep_indices(config, loaded.model.keep_indices())
    elif args.model.startswith("custom:"):
        run_cfg = load_run_config(args.model[len("custom:"):], log=_log)
        config = run_cfg.model
    elif args.model in PRESETS:
        config = PRESETS[args.model]
    else:
        known = ", ".join(sorted(PRESETS) + ["custom:PATH"])
        raise ConfigError(f"unknown model preset {args.model!r}; choose one of: "
                          f"{known}")
    report = build_cost_report(config, plan, image_size=args.image_size)
    text = report_to_kv(report) if args.format == "kv" else report_to_table(report)
    sys.stdout.write(text)
    return 0


def cmd_pipeline(args) -> int:
    run_cfg = load_run_config(args.config, log=_log, seed_override=args.seed)
    rate = run_cfg.prune_rate if args.rate is None else args.rate
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"--rate must lie in [0, 1), got {rate}")
    result = run_pipeline(run_cfg.model, run_cfg.data, run_cfg.train_baseline,
                          run_cfg.train_sparsity, run_cfg.finetune, rate,
                          args.out_dir, resume=args.resume)
    _log(f"pipeline complete: baseline_acc={result.baseline_eval_acc!r} "
         f"sparsity_acc={result.sparsity_eval_acc!r} "
         f"pruned_acc={result.pruned_eval_acc!r} "
         f"final_acc={result.final_eval_acc!r}")
    _log(f"artifacts in {args.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vitprune",
        description="Train, sparsify, slice, and account a gated vision "
                    "transformer.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser(
        "train", help="run one training stage",
        description="Run one training stage from a YAML config. Writes the "
                    "stage checkpoint and a metrics log next to it.")
    p_train.add_argument("--config", required=True, help="YAML config file")
    p_train.add_argument("--stage", required=True,
                         choices=("baseline", "sparsity", "finetune"),
                         help="which stage's settings to use")
    p_train.add_argument("--in", dest="in_path", default=None, metavar="CKPT",
                         help="input checkpoint (required for sparsity/finetune)")
    p_train.add_argument("--out", required=True, metavar="CKPT",
                         help="output checkpoint path")
    p_train.add_argument("--metrics", default=None, metavar="PATH",
                         help="metrics log path (default: <out>.metrics.log)")
    p_train.add_argument("--seed", type=int, default=None,
                         help="override the stage seed from the config")
    p_train.set_defaults(func=cmd_train)

    p_prune = sub.add_parser(
        "prune", help="slice a sparsity-trained checkpoint",
        description="Globally threshold the gate magnitudes at --rate, slice "
                    "the projections, and write a hard checkpoint plus the "
                    "cost report in both formats (<report>.txt, <report>.kv).")
    p_prune.add_argument("--config", required=True, help="YAML config file")
    p_prune.add_argument("--in", dest="in_path", required=True, metavar="CKPT",
                         help="sparsity-stage checkpoint to prune")
    p_prune.add_argument("--rate", type=float, required=True,
                         help="fraction of gate dimensions to remove, in [0, 1)")
    p_prune.add_argument("--out", required=True, metavar="CKPT",
                         help="output (hard) checkpoint path")
    p_prune.add_argument("--report", required=True, metavar="PATH",
                         help="report base path; .txt/.kv suffixes are added")
    p_prune.set_defaults(func=cmd_prune)

    p_an = sub.add_parser(
        "analyze", help="print a parameter/FLOP cost report",
        description="Report parameters and multiply-accumulates for a preset "
                    "(deit-b, vit-b16, toy), a custom:PATH config, or a "
                    "checkpoint (pruned counts for hard checkpoints).")
    p_an.add_argument("--model", default="deit-b",
                      help="preset name or custom:PATH (default: deit-b)")
    p_an.add_argument("--image-size", type=int, default=None,
                      help="analysis input resolution (default: config value)")
    p_an.add_argument("--in", dest="in_path", default=None, metavar="CKPT",
                      help="checkpoint to analyze instead of a preset")
    p_an.add_argument("--format", choices=("table", "kv"), default="table",
                      help="output format (default: table)")
    p_an.set_defaults(func=cmd_analyze)

    p_pipe = sub.add_parser(
        "pipeline", help="run all three stages end to end",
        description="Baseline training, sparsity training, pruning, and "
                    "fine-tuning. Leaves baseline.ckpt, sparse.ckpt, "
                    "pruned.ckpt, final.ckpt, report.txt, report.kv, and "
                    "metrics.log in --out-dir.")
    p_pipe.add_argument("--config", required=True, help="YAML config file")
    p_pipe.add_argument("--rate", type=float, default=None,
                        help="pruning rate override (default: prune.rate)")
    p_pipe.add_argument("--out-dir", required=True, help="artifact directory")
    p_pipe.add_argument("--resume", action="store_true",
                        help="reuse stage checkpoints already in --out-dir")
    p_pipe.add_argument("--seed", type=int, default=None,
                        help="override every stage seed from the config")
    p_pipe.set_defaults(func=cmd_pipeline)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("config", str(exc))
    except CheckpointError as exc:
        return _fail("checkpoint", str(exc))
    except NumericalError as exc:
        return _fail("numerical", str(exc))
    except VitPruneError as exc:
        return _fail("config", str(exc))
    except OSError as exc:
        return _fail("config", f"i/o failure: {exc}")


if __name__ == "__main__":
    sys.exit(main())
