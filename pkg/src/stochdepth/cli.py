"""Command-line entry point: ``stochdepth {train,sweep,check,bench}``.

Exit codes: 0 success, 1 usage or config error, 2 check failure,
3 runtime abort (non-finite loss).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, SweepConfig, load_config, load_sweep_config
from .data import DatasetError
from .training import TrainingDiverged

EXIT_OK, EXIT_USAGE, EXIT_CHECK, EXIT_ABORT = 0, 1, 2, 3

log = logging.getLogger("stochdepth")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stochdepth", description="Stochastic-depth residual network experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="YAML or JSON config file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output directory (overrides out_dir)")

    t = sub.add_parser("train", help="train one configuration")
    common(t)

    s = sub.add_parser("sweep", help="grid over rule x p_L x depth x seed")
    common(s)
    s.add_argument("--workers", type=int, default=1, help="parallel sweep cells")

    c = sub.add_parser("check", help="run the invariant and acceptance checks")
    c.add_argument("--full", action="store_true", help="include the slow training-trend checks")
    c.add_argument("--only", nargs="+", metavar="NAME", help="run only these checks")
    c.add_argument("--workers", type=int, default=1)

    b = sub.add_parser("bench", help="constant vs stochastic epoch wall time")
    common(b, config_required=False)
    b.add_argument("--repeats", type=int, default=5)
    return p


def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = args.out
    return cfg.with_updates(**changes) if changes else cfg


def cmd_train(args) -> int:
    from .experiments import run_experiment

    cfg = _experiment(args)
    res = run_experiment(cfg, cfg.out_dir)
    print(json.dumps(res.summary()))
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .experiments import run_sweep

    sweep = load_sweep_config(args.config)
    if args.seed is not None:
        sweep = SweepConfig(base=sweep.base, grid=sweep.grid.model_copy(update={"seeds": [args.seed]}))
    out = args.out or sweep.base.out_dir
    res = run_sweep(sweep, out, workers=args.workers)
    failed = sum(r.get("status") != "ok" for r in res.rows + res.baseline)
    print(f"{len(res.rows)} sweep rows, {len(res.baseline)} baseline rows, {failed} failed -> {Path(out) / 'sweep.csv'}")
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import run_checks

    results = run_checks(args.only, full=args.full)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_bench(args) -> int:
    from .experiments import run_bench, write_bench
    from .presets import bench_config

    if args.config:
        cfg = _experiment(args)
    else:
        cfg = bench_config()
        if args.seed is not None:
            cfg = cfg.with_updates(seed=args.seed)
    res = run_bench(cfg, repeats=args.repeats)
    for row in res.table():
        print(f"{row['mode']:>10}  median epoch {row['median_epoch_seconds']:.4f}s  skipped {row['skipped_frac']:.4f}  ratio {row['ratio']:.3f}")
    print(f"expected skip fraction {res.expected_savings:.4f} over {res.minibatches} minibatches")
    if args.out:
        write_bench(res, args.out)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "check": cmd_check, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DatasetError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
