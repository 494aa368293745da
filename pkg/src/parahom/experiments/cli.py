"""parahom command line: validate | estimate-mu | effective-f |
corrector-decay | homog-rate | moment-decay.

Exit codes: 0 ok, 1 check failure, 2 config error, 3 numerical failure.
PARAHOM_THREADS overrides --threads.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from ..effective import BracketError
from ..solver import SolverError
from .config import KINDS, ConfigError, default_config, load_config
from . import pipelines

_RUNNERS = {
    "validate": pipelines.run_validate,
    "estimate-mu": pipelines.run_estimate_mu,
    "effective-f": pipelines.run_effective_f,
    "corrector-decay": pipelines.run_corrector_decay,
    "homog-rate": pipelines.run_homog_rate,
    "moment-decay": pipelines.run_moment_decay,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="parahom",
        description="Monte Carlo laboratory for envelopes, subdifferential "
                    "measures and effective operators of random parabolic equations")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind)
        p.add_argument("--config", default=None,
                       help="TOML or JSON config (built-in defaults if omitted)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seeds", type=int, default=None, help="override sample count")
        p.add_argument("--threads", type=int, default=None, help="worker processes")
    return parser


def _resolve_config(args):
    if args.config is None:
        cfg = default_config(args.command)
    else:
        cfg = load_config(args.config)
        if cfg.kind != args.command:
            cfg = replace(cfg, kind=args.command)
    if args.seeds is not None:
        cfg = replace(cfg, seeds=args.seeds)
    threads = args.threads
    env_threads = os.environ.get("PARAHOM_THREADS")
    if env_threads is not None:
        threads = int(env_threads)
    if threads is not None:
        cfg = replace(cfg, threads=threads)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = args.out if args.out is not None else cfg.out_dir
    try:
        report = _RUNNERS[args.command](cfg, out_dir=out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, BracketError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0 if report.get("ok", False) else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
