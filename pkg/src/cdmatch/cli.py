"""Command line entry point: ``cdmatch <command> [--config FILE] [flags]``.

Exit codes: 0 success, 2 configuration error, 3 run failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness as H
from .nets import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 2, 3

COMMANDS = ("train-uncond", "train-cond", "train-cm", "optimize", "sweep-beta", "evaluate", "diagnose", "report")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdmatch", description="Conditional distribution matching experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON experiment config; values override the scale preset")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--runs", type=int, help="independent restarts for optimize")
    p.add_argument("--setting", choices=["2D", "5D", "10D", "toy"])
    p.add_argument("--method", choices=list(H.METHODS) + ["both"], default="both",
                   help="optimize/evaluate only this method (default: both)")
    p.add_argument("--scale", choices=["desk", "paper"])
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _methods(arg: str) -> tuple[str, ...]:
    return H.METHODS if arg == "both" else (arg,)


def run(args: argparse.Namespace) -> object:
    cfg = H.load_config(args.config, seed=args.seed, runs=args.runs, setting=args.setting,
                        scale=args.scale, out=args.out)
    with H.locked(cfg.out_dir):
        (cfg.out_dir / "config.json").write_text(cfg.model_dump_json(indent=1))
        cmd = args.command
        if cmd == "train-uncond":
            return str(H.train_uncond(cfg))
        if cmd == "train-cond":
            return str(H.train_cond(cfg))
        if cmd == "train-cm":
            return str(H.train_cm(cfg))
        if cmd == "optimize":
            for m in _methods(args.method):
                H.optimize(cfg, m)
            return H.report(cfg)
        if cmd == "sweep-beta":
            return H.sweep_beta(cfg)
        if cmd == "evaluate":
            return {m: H.evaluate(cfg, m) for m in _methods(args.method)}
        if cmd == "diagnose":
            return H.diagnose(cfg)
        return H.report(cfg)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        result = run(args)
    except H.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (H.RunFailure, DivergenceError, FloatingPointError) as e:
        print(f"run failed: {e}", file=sys.stderr)
        return EXIT_RUN
    print(json.dumps(result, indent=1, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
