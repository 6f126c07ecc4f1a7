"""Training runs, p_L sweeps and timing benchmarks driven by configs."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, ImageCsvData, SpiralData, SweepConfig
from .data import Dataset, holdout_split, load_image_csv, make_spirals, standardize
from .depth import SurvivalSchedule, savings_estimate
from .resnet import ResNet, to_checkpoint
from .tensor import RngStream, Stream
from .training import (
    EpochMetrics,
    FitResult,
    OptimizerState,
    Streams,
    fit,
    train_epoch,
)

log = logging.getLogger(__name__)

SWEEP_FIELDS = [
    "rule", "p_L", "depth", "seed", "status", "test_error", "val_error",
    "selected_epoch", "wall_seconds", "savings_frac", "error",
]
SUMMARY_FIELDS = ["selected_epoch", "val_error", "test_error", "total_wall_seconds", "savings_frac"]


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    """Train/val/test splits for ``cfg``, standardized with train statistics."""
    d = cfg.dataset
    seed = cfg.seed
    if isinstance(d, SpiralData):
        train = make_spirals(d.n_per_class, d.classes, d.noise, RngStream(seed, Stream.DATA), d.turns)
        # test points come from an independent draw of the same distribution
        test = make_spirals(d.test_per_class, d.classes, d.noise, RngStream(seed + 1_000_003, Stream.DATA), d.turns)
    elif isinstance(d, ImageCsvData):
        train = load_image_csv(d.train_path, d.shape, d.num_classes)
        test = load_image_csv(d.test_path, d.shape, d.num_classes)
    else:  # pragma: no cover
        raise TypeError(type(d))
    ds = holdout_split(train, d.val_fraction, RngStream(seed, Stream.DATA + 16)).concat(test.retag("test"))
    if d.standardize:
        ds, _, _ = standardize(ds)
    return ds


def build_network(cfg: ExperimentConfig, ds: Dataset) -> ResNet:
    in_features = ds.inputs.shape[1]
    return ResNet(cfg.network_spec(in_features, ds.num_classes), RngStream(cfg.seed, Stream.INIT))


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, ds: Dataset | None = None) -> FitResult:
    """Train per ``cfg``; write metrics, summary and checkpoint when ``out_dir`` is set.

    Artifacts: ``metrics.jsonl`` (one record per epoch), ``summary.csv``,
    ``summary.json`` and ``checkpoint.json`` holding the best-validation
    parameters.
    """
    ds = build_dataset(cfg) if ds is None else ds
    net = build_network(cfg, ds)
    schedule = cfg.survival_schedule()
    out = Path(out_dir) if out_dir is not None else None
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.jsonl", "w")

    def emit(m: EpochMetrics):
        if fh is not None:
            fh.write(json.dumps(m.to_dict()) + "\n")
            fh.flush()

    try:
        o = cfg.optimizer
        result = fit(
            net,
            ds,
            epochs=cfg.epochs,
            lr_schedule=cfg.lr(),
            schedule=schedule,
            batch_size=o.batch_size,
            momentum=o.momentum,
            weight_decay=o.weight_decay,
            nesterov=o.nesterov,
            seed=cfg.seed,
            augment=cfg.augment(),
            on_epoch=emit,
        )
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        summary = result.summary()
        with open(out / "summary.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=SUMMARY_FIELDS)
            w.writeheader()
            w.writerow(summary)
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
        net.load_state(result.best_state)
        doc = to_checkpoint(
            net,
            schedule,
            rng_states=result.streams.states() if result.streams else None,
            extra={"selected_epoch": result.selected_epoch, "config": cfg.model_dump(mode="json")},
        )
        (out / "checkpoint.json").write_text(json.dumps(doc))
    return result


# -- sweeps --------------------------------------------------------------------

def _cell_config(base: ExperimentConfig, mode: str, rule: str | None, p_L: float | None, depth: int | None, seed: int) -> ExperimentConfig:
    cfg = base if depth is None else base.with_depth(depth)
    changes = {"mode": mode, "seed": seed, "schedule__L": None}
    if rule is not None:
        changes["schedule__rule"] = rule
        changes["schedule__p_L"] = p_L
    return cfg.with_updates(**changes)


def _run_cell(args) -> dict:
    cfg, row, cell_dir = args
    try:
        res = run_experiment(cfg, cell_dir)
        row.update(
            status="ok",
            test_error=res.test_error,
            val_error=res.val_error,
            selected_epoch=res.selected_epoch,
            wall_seconds=res.total_wall_seconds,
            savings_frac=res.savings_frac,
            error="",
        )
    except Exception as exc:  # one failing cell must not stop the grid
        log.warning("sweep cell %s failed: %s", row, exc)
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return row


def _map(fn, jobs, workers: int):
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def _write_csv(path: Path, rows: list[dict], fields: list[str]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in fields})


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean over seeds for every (rule, p_L, depth) with at least one ok run."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["rule"], r["p_L"], r["depth"]), []).append(r)
    out = []
    for (rule, p_L, depth), rs in groups.items():
        ok = [r for r in rs if r.get("status") == "ok"]
        agg = {"rule": rule, "p_L": p_L, "depth": depth, "n_seeds": len(ok), "n_failed": len(rs) - len(ok)}
        for k in ("test_error", "val_error", "wall_seconds", "savings_frac"):
            agg[k] = float(np.mean([r[k] for r in ok])) if ok else ""
        agg["test_error_std"] = float(np.std([r["test_error"] for r in ok])) if ok else ""
        out.append(agg)
    return out


AGG_FIELDS = ["rule", "p_L", "depth", "n_seeds", "n_failed", "test_error", "test_error_std", "val_error", "wall_seconds", "savings_frac"]


@dataclass
class SweepResult:
    rows: list[dict]
    baseline: list[dict]
    aggregate: list[dict]


def run_sweep(sweep: SweepConfig, out_dir: str | Path, workers: int = 1) -> SweepResult:
    """Every (rule, p_L, depth, seed) cell plus a constant-depth baseline per (depth, seed).

    Writes ``sweep.csv`` (grid rows only), ``baseline.csv`` and
    ``aggregate.csv`` (seed means, baseline included with rule ``constant``).
    """
    base, grid = sweep.base, sweep.grid
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    depths = grid.depths or [None]

    def job(mode, rule, p_L, depth, seed):
        d = depth if depth is not None else base.network.depth
        row = {"rule": rule or "constant", "p_L": "" if p_L is None else p_L, "depth": d, "seed": seed}
        try:
            cfg = _cell_config(base, mode, rule, p_L, depth, seed)
        except Exception as exc:
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            return None, row, None
        tag = "constant" if rule is None else f"{rule}_p{p_L}"
        return cfg, row, out / "cells" / f"{tag}_d{d}_s{seed}"

    base_jobs = [job("constant", None, None, depth, seed) for depth, seed in itertools.product(depths, grid.seeds)]
    jobs = [
        job("stochastic", rule, p_L, depth, seed)
        for rule, p_L, depth, seed in itertools.product(grid.rules, grid.p_L, depths, grid.seeds)
    ]
    all_jobs = base_jobs + jobs
    done = iter(_map(_run_cell, [j for j in all_jobs if j[0] is not None], workers))
    results = [next(done) if j[0] is not None else j[1] for j in all_jobs]
    baseline, rows = results[:len(base_jobs)], results[len(base_jobs):]
    _write_csv(out / "sweep.csv", rows, SWEEP_FIELDS)
    _write_csv(out / "baseline.csv", baseline, SWEEP_FIELDS)
    agg = aggregate(baseline + rows)
    _write_csv(out / "aggregate.csv", agg, AGG_FIELDS)
    return SweepResult(rows, baseline, agg)


# -- timing -----------------------------------------------------------------------

@dataclass
class BenchResult:
    constant_seconds: list[float]
    stochastic_seconds: list[float]
    skipped_frac: float
    flops_saved_frac: float
    expected_savings: float
    minibatches: int

    @property
    def constant_median(self) -> float:
        return statistics.median(self.constant_seconds)

    @property
    def stochastic_median(self) -> float:
        return statistics.median(self.stochastic_seconds)

    @property
    def ratio(self) -> float:
        return self.stochastic_median / self.constant_median

    def table(self) -> list[dict]:
        return [
            {"mode": "constant", "median_epoch_seconds": self.constant_median, "epochs": len(self.constant_seconds),
             "skipped_frac": 0.0, "ratio": 1.0},
            {"mode": "stochastic", "median_epoch_seconds": self.stochastic_median, "epochs": len(self.stochastic_seconds),
             "skipped_frac": self.skipped_frac, "ratio": self.ratio},
        ]


def run_bench(cfg: ExperimentConfig, repeats: int = 5, warmup: int = 1) -> BenchResult:
    """Median epoch wall time of constant vs stochastic depth on identical setups.

    Epochs of the two modes are interleaved so that drifting machine load
    affects both alike. Only training time is measured.
    """
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    ds = build_dataset(cfg)
    x, y = ds.split("train")
    schedule = SurvivalSchedule(cfg.schedule.rule, cfg.schedule.p_L, cfg.network.depth)
    o = cfg.optimizer
    runs = {}
    for name, sched in (("constant", None), ("stochastic", schedule)):
        net = build_network(cfg, ds)
        runs[name] = (net, sched, OptimizerState(o.lr, o.momentum, o.weight_decay, o.nesterov), Streams.from_seed(cfg.seed))
    times = {"constant": [], "stochastic": []}
    executed = batches = 0
    flops_saved = []
    for epoch in range(warmup + repeats):
        for name in ("constant", "stochastic"):
            net, sched, opt, streams = runs[name]
            m = train_epoch(net, x, y, sched, opt, streams, batch_size=o.batch_size, augment=cfg.augment(), epoch=epoch)
            if epoch < warmup:
                continue
            times[name].append(m.wall_seconds)
            if name == "stochastic":
                executed += m.blocks_executed
                batches += m.minibatches
                flops_saved.append(m.block_flops_saved_frac)
    L = cfg.network.depth
    return BenchResult(
        constant_seconds=times["constant"],
        stochastic_seconds=times["stochastic"],
        skipped_frac=1.0 - executed / (L * batches),
        flops_saved_frac=float(np.mean(flops_saved)),
        expected_savings=savings_estimate(schedule),
        minibatches=batches,
    )


def write_bench(result: BenchResult, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "bench.csv"
    _write_csv(path, result.table(), ["mode", "median_epoch_seconds", "epochs", "skipped_frac", "ratio"])
    return path

