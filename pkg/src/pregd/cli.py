"""Command-line entry point.

    pregd <experiment> [--config PATH] [--seed N] [--out PATH] [--override key=value ...]

Exit codes: 0 success, 1 verification failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from .experiments import EXPERIMENTS, ConfigError, load_config, run, write_csv, write_summary

log = logging.getLogger("pregd")


def build_parser():
    p = argparse.ArgumentParser(prog="pregd", description=__doc__.splitlines()[0])
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", type=Path, help="flat key = value file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="CSV path; the JSON summary goes next to it")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--timing", action="store_true", help="record wall-clock time in the JSON summary")
    p.add_argument("--corrupt-readout", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = list(args.override)
    if args.corrupt_readout:
        overrides.append("corrupt_readout = true")
    try:
        cfg = load_config(args.experiment, args.config, overrides, seed=args.seed, output_path=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.output_path or f"results/{cfg.experiment}.csv")

    start = time.perf_counter()
    try:
        result = run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    elapsed = time.perf_counter() - start

    write_csv(result.rows, out)
    write_summary(result, out.with_suffix(".json"), elapsed if args.timing else None)
    log.info("%s finished in %.2fs; %d rows -> %s", cfg.experiment, elapsed, len(result.rows), out)
    for name, dev, tol, ok in result.checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  max_dev={dev:.3e}  tol={tol:.0e}")
    return 0 if result.passed else 1


if __name__ == "__main__":
    sys.exit(main())
