"""Command line: ``ppd <stage> [--config PATH] [--out DIR] [--seed N] ...``."""

from __future__ import annotations

import argparse
import logging
import sys

from threadpoolctl import threadpool_limits

from .autodiff import AutodiffError
from .config import ConfigError, ExperimentConfig, load_config
from .experiments import STAGES, run_dir_for, run_stage

log = logging.getLogger("ppdlab")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppd", description="Personalized preference "
                                     "alignment lab for a toy conditional diffusion model.")
    parser.add_argument("stage", choices=STAGES)
    parser.add_argument("--config", help="config file, or a preset name: multireward, fewshot")
    parser.add_argument("--out", help="output root (default: $PPD_OUT_DIR or ./runs)")
    parser.add_argument("--seed", type=int, help="master seed (overrides the config)")
    parser.add_argument("--jobs", type=int, default=1, help="cap on BLAS/OpenMP threads")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="set a config key, e.g. train.beta=0.5 (repeatable)")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for item in args.override:
        if "=" not in item:
            raise ConfigError(f"--override expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return cfg.with_overrides(overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.jobs < 1:
        log.error("--jobs must be >= 1")
        return 2
    try:
        cfg = resolve_config(args)
        run_dir = run_dir_for(args.out, cfg)
        with threadpool_limits(limits=args.jobs):
            written = run_stage(args.stage, cfg, run_dir)
    except (ValueError, RuntimeError, OSError, KeyError, AutodiffError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1
    for path in written.values():
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
