"""Command line driver.

Subcommands: gen-data, partition, run, decompose, landscape-1d, landscape-2d,
compare. Exit codes: 0 success, 2 config error, 3 runtime failure (missing
files, fingerprint mismatches, invariant violations), each with a one-line
diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import (
    ConfigError,
    build_dataset,
    build_test_dataset,
    load_config_file,
    resolve_experiment,
)
from .harness import (
    gen_data_files,
    partition_files,
    run_compare,
    run_decomposition,
    run_experiment,
)
from .landscape import (
    build_plane,
    default_ranges,
    eval_plane,
    export_grid_csv,
    interpolate_1d,
)
from .nn import ParamVector, load_checkpoint


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment config (YAML)")
    p.add_argument("--seed", type=int, default=None, help="override experiment seed")
    p.add_argument("--out", default=None, help="override output directory")
    p.add_argument("--quiet", action="store_true", help="suppress progress output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedbasin",
                                     description="desk-scale federated averaging lab")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in [
        ("gen-data", "generate the synthetic dataset CSV"),
        ("partition", "partition the dataset and write assignment + report"),
        ("run", "run the federated experiment"),
        ("decompose", "replay the run and write the loss decomposition CSV"),
        ("compare", "run matched arms and write a side-by-side summary"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)

    p1 = sub.add_parser("landscape-1d", help="loss along a segment between two checkpoints")
    _add_common(p1)
    p1.add_argument("--checkpoint-a", required=True, help="model at beta=1")
    p1.add_argument("--checkpoint-b", required=True, help="model at beta=0")
    p1.add_argument("--beta-min", type=float, default=-0.25)
    p1.add_argument("--beta-max", type=float, default=1.25)
    p1.add_argument("--points", type=int, default=25)

    p2 = sub.add_parser("landscape-2d", help="loss over the plane of three checkpoints")
    _add_common(p2)
    p2.add_argument("--checkpoints", nargs=3, required=True,
                    metavar=("W1", "W2", "W3"))
    p2.add_argument("--resolution", type=int, default=None,
                    help="grid points per axis (default from config)")

    return parser


def _landscape_dataset(cfg):
    test_ds = build_test_dataset(cfg)
    return test_ds if test_ds is not None else build_dataset(cfg)


def _load_checkpoint_checked(path: str, spec) -> ParamVector:
    ckpt = Path(path)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    params = load_checkpoint(ckpt)
    params.check_spec(spec)
    return params


def _cmd_landscape_1d(args, cfg) -> None:
    ds = _landscape_dataset(cfg)
    w1 = _load_checkpoint_checked(args.checkpoint_a, cfg.model_spec)
    w2 = _load_checkpoint_checked(args.checkpoint_b, cfg.model_spec)
    betas = list(np.linspace(args.beta_min, args.beta_max, args.points))
    grid = interpolate_1d(w1, w2, betas, ds, cfg.model_spec)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.out_dir / "landscape_1d.csv"
    export_grid_csv(grid, out)
    if not args.quiet:
        print(out)


def _cmd_landscape_2d(args, cfg) -> None:
    ds = _landscape_dataset(cfg)
    anchors = [_load_checkpoint_checked(p, cfg.model_spec) for p in args.checkpoints]
    basis = build_plane(*anchors)
    a_range, b_range = default_ranges(basis, cfg.landscape.margin)
    res = args.resolution or cfg.landscape.resolution
    grid = eval_plane(basis, a_range, b_range, res, res, ds, cfg.model_spec)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.out_dir / "landscape_2d.csv"
    export_grid_csv(grid, out)
    if not args.quiet:
        print(out)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = load_config_file(args.config)
        if args.command == "compare":
            run_compare(raw, out_override=args.out, quiet=args.quiet)
            return 0
        cfg = resolve_experiment(raw, seed_override=args.seed, out_override=args.out)
        if args.command == "gen-data":
            paths = gen_data_files(cfg)
        elif args.command == "partition":
            paths = partition_files(cfg)
        elif args.command == "run":
            out = run_experiment(cfg, quiet=args.quiet)
            paths = [out.metrics_path, out.manifest_path]
        elif args.command == "decompose":
            paths = [run_decomposition(cfg)]
        elif args.command == "landscape-1d":
            _cmd_landscape_1d(args, cfg)
            return 0
        elif args.command == "landscape-2d":
            _cmd_landscape_2d(args, cfg)
            return 0
        else:  # pragma: no cover
            raise ConfigError(f"unknown command {args.command}")
        if not args.quiet:
            for p in paths:
                print(p)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
