"""Command-line entry point.

Subcommands: simulate (write a synthetic observation CSV), estimate (one
randomized-estimator run), mse (error-vs-replicates sweep), oracle (exact
reference for the linear-Gaussian model). Each takes --config/--seed/
--threads/--out; --seed and --threads override the config file.
"""
from __future__ import annotations

import argparse
import sys

from .experiment import PRESETS, load_config, resolve_config, run_estimate, run_mse, run_oracle, run_simulate


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML config file (or a run manifest to replay)")
    parser.add_argument("--preset", choices=sorted(PRESETS), help="named base configuration")
    parser.add_argument("--seed", type=int, help="master seed override")
    parser.add_argument("--threads", type=int, help="worker process count override")
    parser.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="umsa",
        description="Unbiased drift-parameter estimation for partially observed diffusions",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("simulate", "generate a synthetic observation CSV"),
        ("estimate", "run the randomized estimator once"),
        ("mse", "replicate-count sweep with MSE against a reference"),
        ("oracle", "exact linear-Gaussian reference for the ou model"),
    ):
        _add_common(sub.add_parser(name, help=help_text))
    return parser


def config_from_args(args) -> dict:
    cfg: dict = {}
    if args.config:
        cfg = load_config(args.config)
    if args.preset:
        cfg["preset"] = args.preset
    cfg = resolve_config(cfg)
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    if args.threads is not None:
        cfg["threads"] = int(args.threads)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = config_from_args(args)
    runner = {
        "simulate": run_simulate,
        "estimate": run_estimate,
        "mse": run_mse,
        "oracle": run_oracle,
    }[args.command]
    out = runner(cfg, args.out)
    for key, value in out.items():
        if key not in ("summary",):
            print(f"{key}: {value}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
