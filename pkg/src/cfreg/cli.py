"""``cf`` command line: train | memtest | sweep | compare | gradcheck | plot.

Exit codes: 0 success, 1 configuration error, 2 numerical abort, 3 gradient
check failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from . import harness
from .config import RunSpec, load_config
from .nn import ConfigError
from .plot import emit_plot
from .trainer import NumericalAbort

EXIT_OK, EXIT_CONFIG, EXIT_NAN, EXIT_GRADCHECK = 0, 1, 2, 3

RUNNERS = {
    "train": lambda spec, out, jobs: harness.run_train(spec, out),
    "compare": harness.run_compare,
    "memtest": harness.run_memtest,
    "sweep": harness.run_sweep,
}


def _seeds(text: str):
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in RUNNERS:
        p = sub.add_parser(name, help=f"run a {name} experiment")
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", type=Path, help="output directory (default: run.out from the config)")
        p.add_argument("--seeds", type=_seeds, help="comma-separated seeds, overrides run.seeds")
        p.add_argument("--jobs", type=int, default=1, help="worker threads for independent runs")
    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    g.add_argument("--config", type=Path, help="accepted for symmetry; not used")
    g.add_argument("--out", type=Path, help="also write gradcheck.txt here")
    g.add_argument("--seeds", type=_seeds, help="accepted for symmetry; not used")
    pl = sub.add_parser("plot", help="SVG chart of one metrics column from several CSVs")
    pl.add_argument("--field", required=True)
    pl.add_argument("--out", required=True, type=Path)
    pl.add_argument("csv", nargs="+", type=Path)
    return parser


def _load(args) -> RunSpec:
    spec = load_config(args.config)
    if args.seeds:
        spec = replace(spec, seeds=args.seeds)
    return spec


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gradcheck":
            if args.out is not None:
                args.out.mkdir(parents=True, exist_ok=True)
            ok, report = harness.run_gradcheck(args.out)
            print(report)
            return EXIT_OK if ok else EXIT_GRADCHECK
        if args.command == "plot":
            emit_plot(args.csv, args.field, args.out)
            return EXIT_OK
        spec = _load(args)
        out = args.out if args.out is not None else Path(spec.out)
        out.mkdir(parents=True, exist_ok=True)
        for line in RUNNERS[args.command](spec, out, args.jobs):
            print(line)
        return EXIT_OK
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NAN


if __name__ == "__main__":
    sys.exit(main())
