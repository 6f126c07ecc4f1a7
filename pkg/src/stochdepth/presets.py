"""Desk-scale configurations used by the acceptance checks and the CLI defaults."""
from __future__ import annotations

from .config import ExperimentConfig, SweepConfig, SweepGrid, parse_config

# five fixed seeds for the error and gradient trend studies
TREND_SEEDS = (0, 1, 2, 3, 4)

TREND = {
    "dataset": {"kind": "spirals", "n_per_class": 50, "classes": 3, "noise": 0.1, "turns": 1.0,
                "test_per_class": 1000, "val_fraction": 0.2},
    "network": {"flavor": "dense", "groups": [[54, 32]]},
    "mode": "stochastic",
    "schedule": {"rule": "linear_decay", "p_L": 0.5},
    "optimizer": {"lr": 0.01, "momentum": 0.9, "weight_decay": 1e-4, "nesterov": True, "batch_size": 32},
    "lr_schedule": {"milestones": [75, 112], "factor": 0.1},
    "epochs": 150,
    "seed": 0,
    "out_dir": "runs/spirals_L54",
}

BENCH = {
    "dataset": {"kind": "spirals", "n_per_class": 1000, "classes": 3, "noise": 0.1, "test_per_class": 10,
                "val_fraction": 0.2},
    "network": {"flavor": "dense", "groups": [[54, 32]]},
    "mode": "stochastic",
    "schedule": {"rule": "linear_decay", "p_L": 0.5},
    "optimizer": {"lr": 0.01, "batch_size": 32},
    "epochs": 1,
    "seed": 0,
    "out_dir": "runs/bench_L54",
}

SWEEP_GRID = {
    "p_L": [0.2, 0.35, 0.5, 0.65, 0.8, 1.0],
    "rules": ["uniform", "linear_decay"],
    "seeds": [0],
}


def trend_config() -> ExperimentConfig:
    return parse_config(TREND)


def bench_config() -> ExperimentConfig:
    return parse_config(BENCH)


def sweep_config() -> SweepConfig:
    return SweepConfig(base=trend_config().with_updates(out_dir="runs/sweep_pL"), grid=SweepGrid(**SWEEP_GRID))
