"""Slow training-trend checks: error reduction, gradient strength, sweep integrity."""
from __future__ import annotations

import tempfile
import time

import numpy as np

from .checks import CheckResult
from .config import ExperimentConfig, SweepConfig
from .experiments import build_dataset, run_experiment, run_sweep
from .presets import TREND_SEEDS, sweep_config, trend_config

VARIANTS = {
    "constant": {"mode": "constant"},
    "linear": {"mode": "stochastic", "schedule__rule": "linear_decay", "schedule__p_L": 0.5},
    "uniform": {"mode": "stochastic", "schedule__rule": "uniform", "schedule__p_L": 0.5},
}

_study_cache: dict = {}


def trend_study(cfg: ExperimentConfig | None = None, seeds=TREND_SEEDS) -> dict:
    """FitResults keyed by ``(variant, seed)``; memoized per (config, seeds)."""
    cfg = trend_config() if cfg is None else cfg
    key = (cfg.model_dump_json(), tuple(seeds))
    if key in _study_cache:
        return _study_cache[key]
    results = {}
    for seed in seeds:
        base = cfg.with_updates(seed=seed)
        ds = build_dataset(base)
        for name, changes in VARIANTS.items():
            results[name, seed] = run_experiment(base.with_updates(**changes), ds=ds)
    _study_cache[key] = results
    return results


def mean_test_errors(results: dict) -> dict[str, float]:
    return {
        name: float(np.mean([r.test_error for (n, _), r in results.items() if n == name]))
        for name in VARIANTS
    }


def check_error_trend(cfg: ExperimentConfig | None = None, seeds=TREND_SEEDS) -> CheckResult:
    t0 = time.perf_counter()
    means = mean_test_errors(trend_study(cfg, seeds))
    failures = []
    if not means["linear"] <= means["constant"]:
        failures.append(f"stochastic {means['linear']:.4f} > constant {means['constant']:.4f}")
    if not means["linear"] <= means["uniform"]:
        failures.append(f"linear decay {means['linear']:.4f} > uniform {means['uniform']:.4f}")
    obs = " ".join(f"{k}={v:.4f}" for k, v in means.items())
    return CheckResult(
        "error-reduction trend", not failures, obs, "linear <= constant and linear <= uniform (seed means)",
        failures=failures, seconds=time.perf_counter() - t0,
    )


def gradient_win_fraction(results: dict, first_drop: int) -> float:
    """Share of epochs at or after ``first_drop`` where stochastic |grad| beats constant."""
    wins = total = 0
    seeds = sorted({s for _, s in results})
    for seed in seeds:
        sd = results["linear", seed].history
        cd = results["constant", seed].history
        for a, b in zip(sd, cd):
            if a.epoch >= first_drop:
                total += 1
                wins += a.mean_abs_grad_block1 > b.mean_abs_grad_block1
    return wins / total if total else float("nan")


def check_gradient_trend(cfg: ExperimentConfig | None = None, seeds=TREND_SEEDS, threshold: float = 0.6) -> CheckResult:
    t0 = time.perf_counter()
    cfg = trend_config() if cfg is None else cfg
    milestones = cfg.lr_schedule.milestones
    first_drop = milestones[0] if milestones else 0
    frac = gradient_win_fraction(trend_study(cfg, seeds), first_drop)
    return CheckResult(
        "gradient-strength trend", bool(frac >= threshold), frac, f">= {threshold:g} of epochs after epoch {first_drop}",
        seconds=time.perf_counter() - t0,
    )


def check_sweep_integrity(sweep: SweepConfig | None = None, out_dir=None, workers: int = 1) -> CheckResult:
    t0 = time.perf_counter()
    sweep = sweep_config() if sweep is None else sweep
    grid = sweep.grid
    with tempfile.TemporaryDirectory() as tmp:
        res = run_sweep(sweep, out_dir or tmp, workers=workers)
    failures = []
    expected = len(grid.rules) * len(grid.p_L) * len(grid.depths or [None]) * len(grid.seeds)
    if len(res.rows) != expected:
        failures.append(f"{len(res.rows)} rows, expected {expected}")
    bad = [r for r in res.rows + res.baseline if r.get("status") != "ok"]
    if bad:
        failures.append(f"{len(bad)} failed cells")
    base = {(r["depth"], r["seed"]): r["test_error"] for r in res.baseline if r.get("status") == "ok"}
    gap = 0.0
    for r in res.rows:
        if r["p_L"] == 1.0 and r.get("status") == "ok":
            gap = max(gap, abs(r["test_error"] - base[r["depth"], r["seed"]]))
    if gap > 1e-12:
        failures.append(f"p_L=1 rows differ from baseline by {gap:.4f}")
    return CheckResult(
        "sweep integrity", not failures, f"{len(res.rows)} rows, p_L=1 gap {gap:.2g}",
        "complete grid; p_L=1 equals baseline", failures=failures, seconds=time.perf_counter() - t0,
    )


TREND_CHECKS = {
    "error_trend": check_error_trend,
    "gradient_trend": check_gradient_trend,
    "sweep": check_sweep_integrity,
}

