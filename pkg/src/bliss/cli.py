"""Command-line entry point.

    bliss run --config configs/desk.conf --seed 7 --out-dir runs/s7
    bliss bilevel --config ... --round 1

Exit status is 0 on success, 1 for usage or configuration errors and 2 when a
stage fails at runtime.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline
from .config import ConfigError, _parse_value, load_config

STAGES = ("bilevel", "score", "select", "retrain", "evaluate")
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", metavar="PATH")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")

    parser = _Parser(prog="bliss", description="Bilevel data selection at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic train/val/held-out sets")
    sub.add_parser("warmup", parents=[common], help="warm up proxy, score and target models")
    for name in STAGES:
        p = sub.add_parser(name, parents=[common], help=f"run the {name} stage of one round")
        p.add_argument("--round", type=int, required=True, metavar="N")
        if name == "select":
            p.add_argument("--fraction", type=float, metavar="F")
    sub.add_parser("run", parents=[common], help="run every stage of every round")
    return parser


def config_from_args(args):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = _parse_value(key.strip(), value)
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("seed: must be an unsigned 64-bit integer")
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    return load_config(args.config, overrides)


def dispatch(cfg, args):
    cmd = args.command
    if cmd == "gen-data":
        return pipeline.stage_gen_data(cfg)
    if cmd == "warmup":
        return pipeline.stage_warmup(cfg)
    if cmd == "run":
        return [r["evaluate"] for r in pipeline.run(cfg)]
    if not 0 <= args.round < cfg.rounds:
        raise ConfigError(f"round: {args.round} outside [0, {cfg.rounds})")
    if cmd == "bilevel":
        return pipeline.stage_bilevel(cfg, args.round)
    if cmd == "score":
        return pipeline.stage_score(cfg, args.round)
    if cmd == "select":
        if args.fraction is not None and not 0 < args.fraction <= 1:
            raise ConfigError("fraction: must lie in (0, 1]")
        sel = pipeline.stage_select(cfg, args.round, args.fraction)
        return {"selected": len(sel.indices)}
    if cmd == "retrain":
        return {"last_loss": pipeline.stage_retrain(cfg, args.round)}
    return pipeline.stage_evaluate(cfg, args.round)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        cfg = config_from_args(args)
    except (ConfigError, OSError) as exc:
        print(f"bliss: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    pipeline.set_threads()
    try:
        out = dispatch(cfg, args)
    except ConfigError as exc:
        print(f"bliss: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pipeline.StageError as exc:
        print(f"bliss: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"bliss: stage {args.command!r} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if out is not None:
        print(json.dumps(out, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
