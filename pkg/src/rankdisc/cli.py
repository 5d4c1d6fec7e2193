"""Command-line entry point.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 missing or
incompatible prerequisite artifact, 3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from . import runner
from .config import ConfigError, RunConfig, dump_config, load_config
from .data import IdxFormatError
from .losses import NumericError
from .model import CheckpointError, IncompatibleCheckpointError
from .pipeline import StageOrderError

EXIT_OK, EXIT_INVALID, EXIT_DEPENDENCY, EXIT_NUMERIC = 0, 1, 2, 3

ABLATIONS = ("no_bce", "no_ce", "no_consistency", "no_selfsup")


def _common(p: argparse.ArgumentParser, ablations: bool = True):
    p.add_argument("--config", "-c", help="YAML run config (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--output-dir", "-o", help="override the config output directory")
    p.add_argument("--verbose", "-v", action="store_true", help="log every epoch")
    if ablations:
        for name in ABLATIONS:
            p.add_argument(f"--{name}", action="store_true", help=f"ablation: {name.replace('_', ' ')}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rankdisc",
        description="Discover novel classes from rank statistics, in stages.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "pretrain": "stage 1: rotation self-supervision on all images",
        "finetune": "stage 2: supervised fine-tuning on the labelled classes",
        "discover": "stage 3: joint CE + rank-statistics BCE + consistency",
        "incremental": "stage 3 with the labelled head extended to the new classes",
        "run-all": "pretrain, finetune and discover in one go",
    }
    for name, text in helps.items():
        _common(sub.add_parser(name, help=text, description=text))
    p = sub.add_parser("evaluate", help="metrics of a saved checkpoint")
    _common(p)
    p.add_argument("--checkpoint", help="checkpoint to evaluate (default: latest stage present)")
    p = sub.add_parser("sweep-k", help="stage 3 once per k from the shared stage-2 checkpoint")
    _common(p)
    p.add_argument("--k", type=int, nargs="+", required=True, help="k values to try")
    p = sub.add_parser("show-config", help="print the fully resolved config as YAML")
    _common(p)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError(["--seed must be >= 0"])
        cfg = replace(cfg, seed=args.seed)
    if args.output_dir:
        cfg = replace(cfg, output_dir=args.output_dir)
    flags = {name: getattr(args, name, False) for name in ABLATIONS}
    return cfg.with_ablation(**flags)


def _print(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def _stage_summary(report):
    if report is None:
        return {"skipped": True}
    last = report.epochs[-1] if report.epochs else None
    out = {"stage": report.stage, "checkpoint": report.checkpoint_path,
           "config_digest": report.config_digest}
    if last is not None:
        out["final_total_loss"] = last.total
        if last.unlabelled_acc == last.unlabelled_acc:
            out["final_unlabelled_acc"] = last.unlabelled_acc
    return out


def dispatch(args) -> int:
    cfg = resolve_config(args)
    cmd = args.command
    if cmd == "show-config":
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    if cmd == "pretrain":
        _print(_stage_summary(runner.pretrain(cfg)))
    elif cmd == "finetune":
        _print(_stage_summary(runner.finetune(cfg)))
    elif cmd == "discover":
        _print(_stage_summary(runner.discover(cfg)))
    elif cmd == "incremental":
        _print(_stage_summary(runner.incremental(cfg)))
    elif cmd == "run-all":
        data = runner.build_datasets(cfg)
        _print({"selfsup": _stage_summary(runner.pretrain(cfg, data)),
                "supervised": _stage_summary(runner.finetune(cfg, data)),
                "joint": _stage_summary(runner.discover(cfg, data))})
    elif cmd == "evaluate":
        _print(runner.evaluate(cfg, args.checkpoint))
    elif cmd == "sweep-k":
        rows = runner.sweep(cfg, args.k)
        _print([{"k": r.k, "unlabelled_acc": r.unlabelled_acc} for r in rows])
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; 2 is reserved for dependencies here
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (runner.DependencyError, StageOrderError, CheckpointError,
            IncompatibleCheckpointError) as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IdxFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
