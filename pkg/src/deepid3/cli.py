"""Command-line entry point: ``deepid3 <command> [--config F] [--seed N] [--out-dir D]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import PipelineConfig, format_config, load_config
from .errors import DeepIDError, StageError
from .pipeline import run_pipeline, run_stage

COMMANDS = {
    "gen-data": "generate the synthetic dataset",
    "train": "train every configured network",
    "extract": "extract per-network features of the train and test splits",
    "fit-recognition": "fit PCA and Joint Bayesian on training features",
    "eval": "run verification, closed-set and open-set protocols",
    "pipeline": "run all of the above in order",
    "show-config": "print the effective configuration",
}


def _parser():
    p = argparse.ArgumentParser(prog="deepid3", description="Toy multi-region face recognition pipeline.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    for name, help_ in COMMANDS.items():
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", help="configuration file ([section] key = value)")
        sp.add_argument("--seed", type=int, help="master seed (overrides [run] seed)")
        sp.add_argument("--out-dir", default="deepid3_out", help="output directory (default: %(default)s)")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else PipelineConfig()
    except (DeepIDError, OSError) as exc:
        print(f"deepid3: config: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg.seed = args.seed

    try:
        if args.command == "show-config":
            sys.stdout.write(format_config(cfg))
        elif args.command == "pipeline":
            summary = run_pipeline(cfg, args.out_dir)
            for k, v in summary.items():
                print(f"{k}\t{v:.4f}")
        else:
            result = run_stage(args.command, cfg, args.out_dir)
            if args.command == "eval":
                for k, v in result.items():
                    print(f"{k}\t{v:.4f}")
    except StageError as exc:
        print(f"deepid3: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
