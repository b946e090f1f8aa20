"""``sct`` command line.

Exit codes: 0 success, 2 usage or config error, 3 data or format error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .config import ConfigError, load_config
from .decomp import DecompositionError
from .io import FormatError
from .pipeline import METHODS, DependencyError, LockError, run_pipeline

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# the bootstrap stage is part of dictionary training on the command line
COMMANDS = {
    "simulate": ["simulate"],
    "fbp": ["fbp"],
    "basis": ["basis"],
    "train-dict": ["bootstrap", "train-dict"],
    "decompose": ["decompose"],
    "evaluate": ["evaluate"],
    "render": ["render"],
    "run": None,
}


class _UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageExit(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sct", description="Spectral CT material decomposition pipeline")
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", help="JSON config (defaults built in)")
    p.add_argument("--method", choices=METHODS, action="append",
                   help="restrict decompose/evaluate/render to a method (repeatable)")
    p.add_argument("--force", action="store_true", help="rerun stages even if up-to-date")
    p.add_argument("--seed", type=int, help="override noise.seed")
    p.add_argument("--out", help="output root (overrides outputs.directory)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _threads():
    raw = os.environ.get("SCT_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SCT_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"SCT_THREADS must be a positive integer, got {raw!r}")
    return n


def _execute(args):
    cfg = load_config(args.config, args.seed)
    n = _threads()
    stages = COMMANDS[args.command]
    if n is None:
        return run_pipeline(cfg, stages, args.method, args.force, args.out)
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=n):
        return run_pipeline(cfg, stages, args.method, args.force, args.out)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageExit as e:
        print(f"sct: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = _execute(args)
    except (ConfigError, LockError) as e:
        print(f"sct: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, DependencyError, FileNotFoundError) as e:
        print(f"sct: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (DecompositionError, FloatingPointError, ArithmeticError, np.linalg.LinAlgError) as e:
        print(f"sct: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    for stage, state in result["status"].items():
        print(f"{stage}: {state}")
    print(f"outputs: {result['directory']}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
