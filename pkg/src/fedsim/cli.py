"""Command-line front end: partition | train | eval | sweep.

Exit codes: 0 ok, 2 invalid config, 3 numeric failure. FEDSIM_LOG sets
verbosity (debug/info/warning).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .engine import NumericError
from .experiment import ConfigError, ExperimentConfig, run_eval, run_partition, run_train
from .sweep import load_sweep, run_sweep

log = logging.getLogger("fedsim")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _setup_logging() -> None:
    level = os.environ.get("FEDSIM_LOG", "warning").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    return cfg.with_overrides(seed=args.seed, out=args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsim",
        description="Deterministic federated-learning simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, type=Path, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")

    p = sub.add_parser("partition", help="write client splits and label histograms")
    common(p)

    p = sub.add_parser("train", help="run the federation; writes checkpoint and round CSV")
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="threads for per-round client updates")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    p.add_argument(
        "--stop-after", type=int, default=None,
        help="stop after this round (checkpoint is written; use --resume to finish)",
    )

    p = sub.add_parser("eval", help="evaluate a checkpoint: initial/personalized/template reports")
    common(p)
    p.add_argument(
        "--checkpoint", type=Path, default=None,
        help="checkpoint directory (defaults to the config's output directory)",
    )

    p = sub.add_parser("sweep", help="run a grid of cells and consolidate results.csv")
    p.add_argument("--config", required=True, type=Path, help="sweep config (JSON)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes for cells")
    p.add_argument("--out", default=None, help="override the sweep output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "partition":
            run_partition(_load_config(args))
        elif args.command == "train":
            run_train(
                _load_config(args),
                jobs=args.jobs,
                resume=args.resume,
                stop_after=args.stop_after,
            )
        elif args.command == "eval":
            run_eval(_load_config(args), checkpoint_dir=args.checkpoint)
        elif args.command == "sweep":
            sweep = load_sweep(args.config)
            if args.out:
                sweep["out"] = args.out
            path = run_sweep(sweep, jobs=args.jobs)
            print(path)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
