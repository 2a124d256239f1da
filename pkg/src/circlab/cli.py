"""Command-line entry point: ``circlab <task> [--config PATH] [--seed N] [--out DIR] [--profile MODE]``."""

from __future__ import annotations

import argparse
import json
import sys
from typing import Sequence

from .common.errors import ConfigError
from .common.log import get_logger
from .common.settings import TASKS, load_config, validate_config
from .experiment import run_experiment, with_overrides

log = get_logger("cli")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="circlab",
        description="Numerical lab for circle maps x + a + L ln|Phi(x)|",
    )
    parser.add_argument("task", choices=TASKS, help="What to run; 'all' runs every task in order")
    parser.add_argument("--config", help="JSON config file (default: $CIRCLAB_CONFIG or built-in defaults)")
    parser.add_argument("--seed", type=int, help="Override run.seed")
    parser.add_argument("--out", help="Output directory (a fresh sibling is used if it is not empty)")
    parser.add_argument("--profile", choices=("paper", "practical"), help="Override profile.mode")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg = validate_config(
            with_overrides(cfg, task=args.task, seed=args.seed, out=args.out, profile=args.profile)
        )
    except ConfigError as e:
        print(json.dumps({"failures": [{"error": "ConfigError", "message": str(e)}]}), file=sys.stderr)
        return 2
    bundle = run_experiment(cfg)
    if bundle.failures:
        print(json.dumps({"failures": bundle.failures}, default=str), file=sys.stderr)
    log.info("summary: {}", bundle.summary_path)
    return 0 if bundle.passed else 1


if __name__ == "__main__":
    sys.exit(main())
