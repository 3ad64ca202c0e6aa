"""Command line: run / sweep / landscape / validate."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError


def _values(text):
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_run(args):
    from .harness import load_config, output_root, run_experiment
    cfg = load_config(args.config)
    out = Path(args.out) if args.out else output_root() / Path(args.config).stem
    table = run_experiment(cfg, out)
    print(table.format())
    print(f"results: {out / 'results.csv'}")
    return 0 if table.ok() else 1


def cmd_sweep(args):
    from .harness import RANK_GRID, SIGMA_GRID, load_config, output_root, sweep
    cfg = load_config(args.config)
    if args.values:
        values = _values(args.values)
    else:
        values = {"sigma": SIGMA_GRID, "rank": RANK_GRID}.get(args.param)
        if values is None:
            raise ConfigError("--values is required for this parameter", ["values"])
    if args.param == "rank":
        values = [int(v) for v in values]
    out = Path(args.out) if args.out else output_root() / f"{Path(args.config).stem}_{args.param}"
    table = sweep(cfg, args.param, values, out)
    print(table.format())
    print(f"results: {out / 'results.csv'}")
    return 0 if table.ok() else 1


def cmd_landscape(args):
    from .data import DatasetSpec, make_dataset
    from .landscape import filter_normalized_direction, loss_surface
    from .model import load_checkpoint
    model, header = load_checkpoint(args.checkpoint)
    cfg = header.get("config")
    if not cfg:
        raise ConfigError("checkpoint header carries no experiment config", ["config"])
    train, test = make_dataset(DatasetSpec.from_dict(cfg["dataset"]))
    data = train if args.split == "train" else test
    seed = args.seed if args.seed is not None else int(header.get("seed", 0))
    dirs = [filter_normalized_direction(model, seed, i) for i in range(args.dims)]
    k = args.grid or (201 if args.dims == 1 else 41)
    grid = loss_surface(model, data, dirs, k=k, radius=args.radius,
                        dataset_id=f"{cfg['dataset']['kind']}:{args.split}",
                        snapshot_id=Path(args.checkpoint).name)
    grid.meta.update({"direction_seed": seed, "grid": k})
    stem = Path(args.out) if args.out else Path(args.checkpoint).with_suffix("")
    stem = Path(f"{stem}_landscape{args.dims}d")
    grid.to_csv(stem.with_suffix(".csv"))
    grid.to_json(stem.with_suffix(".json"))
    finite = grid.values[np.isfinite(grid.values)]
    print(f"origin loss {grid.origin:.6f}; min {finite.min():.6f}; max {finite.max():.6f}")
    print(f"wrote {stem.with_suffix('.csv')} and {stem.with_suffix('.json')}")
    return 0


def cmd_validate(args):
    from .validation import run_all
    results = run_all(skip_slow=args.skip_slow)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser():
    p = argparse.ArgumentParser(prog="flatlora", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train every seed of a JSON config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (default $FLATLORA_OUTPUT_ROOT/<config stem>)")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="cross product of parameter values x seeds")
    s.add_argument("config")
    s.add_argument("--param", required=True, choices=["sigma", "rho", "rank"])
    s.add_argument("--values", help="comma separated; defaults to the standard σ / rank grid")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    l = sub.add_parser("landscape", help="loss surface around a checkpoint's merged weights")
    l.add_argument("checkpoint")
    l.add_argument("--dims", type=int, choices=[1, 2], default=1)
    l.add_argument("--radius", type=float, default=1.0)
    l.add_argument("--grid", type=int, help="odd number of points per axis")
    l.add_argument("--split", choices=["train", "test"], default="train")
    l.add_argument("--seed", type=int)
    l.add_argument("--out", help="output path stem")
    l.set_defaults(func=cmd_landscape)

    v = sub.add_parser("validate", help="run the invariant / acceptance suite")
    v.add_argument("--skip-slow", action="store_true", help="skip the multi-seed training check")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
