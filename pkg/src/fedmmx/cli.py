"""Command-line entry point: ``fedmmx {generate,train,ablate,compare}``."""
from __future__ import annotations

import argparse
import logging
import os
import sys

from . import harness
from .config import ExperimentConfig, load_config, parse_seeds
from .data import SpecError

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedmmx", description="Trust-weighted federated multimodal NAM simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, parallel=True):
        sp.add_argument("--config", help="TOML experiment config (defaults used when omitted)")
        sp.add_argument("--out", help="output directory (default: the config's out_dir)")
        sp.add_argument("--seeds", help='comma-separated seeds, e.g. "0,1,2"; overrides the config')
        if parallel:
            sp.add_argument("--parallel", type=int, default=1, metavar="N", help="worker processes over seeds")

    common(sub.add_parser("generate", help="write the synthetic federated dataset"), parallel=False)
    common(sub.add_parser("train", help="run one simulation per seed and export metrics"))
    common(sub.add_parser("ablate", help="run the four ablation variants over shared seeds"))
    cp = sub.add_parser("compare", help="tabulate and export curves from finished runs")
    cp.add_argument("runs", nargs="+", help="run directories produced by train")
    cp.add_argument("--out", default="compare", help="output directory (default: compare)")
    return p


def _configure_logging() -> None:
    name = os.environ.get("FEDMMX_LOG_LEVEL", "error").lower()
    if name not in LOG_LEVELS:
        raise SpecError("FEDMMX_LOG_LEVEL", f"must be one of {', '.join(LOG_LEVELS)}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        _configure_logging()
        if args.command == "compare":
            print(harness.compare(args.runs, args.out), end="")
            return 0
        cfg = _load(args)
        seeds = parse_seeds(args.seeds) if args.seeds else None
        parallel = getattr(args, "parallel", 1)
        if parallel < 1:
            raise SpecError("--parallel", "must be >= 1")
        if args.command == "generate":
            harness.generate(cfg, args.out, seeds)
        elif args.command == "train":
            print(harness.train(cfg, args.out, seeds, parallel))
        elif args.command == "ablate":
            harness.ablate(cfg, args.out, seeds, parallel)
        return 0
    except SpecError as exc:
        print(f"fedmmx: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except harness.SeedFailure as exc:
        print(f"fedmmx: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"fedmmx: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
