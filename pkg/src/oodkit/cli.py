"""Command-line entry point.

Subcommands: train, finetune, fit-detector, evaluate, gen-synthetic, report.
Exit statuses: 0 success, 2 configuration or data error, 3 numeric
divergence, 4 evaluation finished with failed cells.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness
from .errors import ConfigError, DivergenceError, OodkitError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_PARTIAL = 4


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="experiment config (JSON)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the master seed")
    parser.add_argument("--out", default=None, help="override the output dir")
    parser.add_argument("--jobs", type=int, default=1,
                        help="parallel workers for grid commands")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oodkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the cross-entropy model")
    _common_flags(p)

    p = sub.add_parser("finetune",
                       help="fine-tune over the regularizer grid and select")
    _common_flags(p)
    p.add_argument("--checkpoint", default=None,
                   help="base checkpoint (default: <out>/ce_net)")

    p = sub.add_parser("fit-detector", help="fit and persist a detector")
    _common_flags(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--detector", required=True, choices=["md", "fcgm"])

    p = sub.add_parser("evaluate", help="score all (model, detector) pairs")
    _common_flags(p)
    p.add_argument("--model", action="append", default=[],
                   metavar="NAME=PATH",
                   help="model checkpoint; repeatable "
                        "(default: ce/oecc nets under <out>)")

    p = sub.add_parser("gen-synthetic",
                       help="generate synthetic validation outlier sets")
    _common_flags(p)

    p = sub.add_parser("report", help="re-render results from raw scores")
    _common_flags(p)
    return parser


def _load_config(args) -> harness.ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    return harness.load_config(args.config, seed=args.seed, out_dir=args.out)


def _default_checkpoint(cfg: harness.ExperimentConfig, arg) -> str:
    if arg:
        return arg
    path = Path(cfg.out_dir) / "ce_net"
    if not path.exists():
        raise ConfigError(f"no checkpoint given and {path} does not exist")
    return str(path)


def _model_map(cfg: harness.ExperimentConfig, entries) -> dict[str, str]:
    if entries:
        models = {}
        for entry in entries:
            if "=" not in entry:
                raise ConfigError(f"--model expects NAME=PATH, got {entry!r}")
            name, path = entry.split("=", 1)
            models[name] = path
        return models
    models = {}
    for name in ("ce", "oecc"):
        path = Path(cfg.out_dir) / f"{name}_net"
        if path.exists():
            models[name] = str(path)
    if not models:
        raise ConfigError(f"no --model given and no checkpoints under "
                          f"{cfg.out_dir}")
    return models


def run(args) -> int:
    if args.command == "report":
        out = args.out
        if out is None and args.config:
            out = harness.load_config(args.config, seed=args.seed).out_dir
        if out is None:
            raise ConfigError("report needs --out or --config")
        harness.cmd_report(out)
        return EXIT_OK
    cfg = _load_config(args)
    if args.command == "train":
        harness.cmd_train(cfg)
        return EXIT_OK
    if args.command == "finetune":
        harness.cmd_finetune(cfg, _default_checkpoint(cfg, args.checkpoint),
                             jobs=args.jobs)
        return EXIT_OK
    if args.command == "fit-detector":
        harness.cmd_fit_detector(cfg, _default_checkpoint(cfg, args.checkpoint),
                                 args.detector)
        return EXIT_OK
    if args.command == "evaluate":
        table = harness.cmd_evaluate(cfg, _model_map(cfg, args.model))
        return EXIT_PARTIAL if table.failed_rows else EXIT_OK
    if args.command == "gen-synthetic":
        harness.cmd_gen_synthetic(cfg)
        return EXIT_OK
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OodkitError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
