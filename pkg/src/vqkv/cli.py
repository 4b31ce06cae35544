"""Command-line entry point.

Every subcommand takes a config file (see :mod:`vqkv.io` for the grammar)
plus ``--seed`` and ``--out``. The subcommand fixes the experiment and
overrides any ``experiment`` key in the file.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .experiments import run_experiment
from .io import load_config

SUBCOMMANDS = {
    "train-codebook": "train_codebook",
    "quantize": "quantize",
    "sim-codebooks": "codebook_similarity",
    "dump-h": "h_dump",
    "mse-compare": "attention_mse",
    "ablate": "ablation_grid",
    "recall-sweep": "recall_sweep",
    "serve-sim": "serve_sim",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vqkv", description="Vector-quantized KV retrieval experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, experiment in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=f"run the {experiment} experiment")
        p.add_argument("config", help="path to a key = value config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory for reports and artifacts")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr)
    experiment = SUBCOMMANDS[args.command]
    try:
        cfg = load_config(args.config, seed=args.seed, experiment=experiment)
        rows = run_experiment(cfg, args.out)
    except (OSError, ValueError, ArithmeticError) as exc:
        print(f"vqkv {args.command}: error: {exc}", file=sys.stderr)
        return 1
    if args.out is None:
        for row in rows:
            if not row.label:
                print(f"{row.metric}\t{row.value!r}\t{row.units}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
