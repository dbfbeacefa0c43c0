"""Command-line entry point.

    kalbucy run <config-file> [--seed N] [--out DIR] [--workers N] [--quiet]
    kalbucy validate <config-file>

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ConfigError, load_config
from .experiments import NumericalError, render_csv, run_experiment, write_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kalbucy")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config and emit its CSV")
    run.add_argument("config", type=Path)
    run.add_argument("--seed", type=int, default=None, help="override the master seed")
    run.add_argument("--out", type=Path, default=None, help="output directory override")
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--quiet", action="store_true")

    val = sub.add_parser("validate", help="check a config file and exit")
    val.add_argument("config", type=Path)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "validate":
        try:
            load_config(args.config)
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"{args.config}: OK")
        return EXIT_OK

    if not args.quiet:
        logging.getLogger("kalbucy").setLevel(logging.INFO)
    try:
        config = load_config(args.config, seed_override=args.seed)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = run_experiment(config, workers=max(1, args.workers))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL

    out_path = config.output_path
    if out_path is None:
        sys.stdout.write(render_csv(result))
        return EXIT_OK
    out_path = Path(out_path)
    if args.out is not None:
        out_path = args.out / out_path.name
    written = write_csv(result, out_path)
    if not args.quiet:
        print(f"wrote {written}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
