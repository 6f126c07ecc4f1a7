import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from stochdepth import layers
from stochdepth.cli import main
from stochdepth.config import ConfigError, ExperimentConfig, SweepGrid, load_config, parse_config

TINY = {
    "dataset": {"kind": "spirals", "n_per_class": 20, "classes": 3, "noise": 0.1, "test_per_class": 20},
    "network": {"flavor": "dense", "groups": [[3, 8]]},
    "mode": "stochastic",
    "schedule": {"rule": "linear_decay", "p_L": 0.5},
    "optimizer": {"lr": 0.05, "batch_size": 16},
    "epochs": 3,
    "seed": 1,
}


def write_cfg(tmp_path, doc, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(doc))
    return str(p)


def records(path):
    return [json.loads(line) for line in open(path)]


def test_defaults_validate():
    cfg = ExperimentConfig()
    assert cfg.network.depth == 54
    assert cfg.survival_schedule().L == 54


@pytest.mark.parametrize(
    "doc",
    [
        {"epochs": 3, "learning_rate": 0.1},
        {"optimizer": {"lr": 0.1, "momentun": 0.9}},
        {"schedule": {"rule": "cosine"}},
        {"schedule": {"p_L": 0.0}},
        {"schedule": {"p_L": 0.5, "L": 7}},
        {"lr_schedule": {"milestones": [20, 10]}},
        {"dataset": {"kind": "mnist"}},
        {"network": {"flavor": "conv"}},
        {"network": {"groups": []}},
    ],
)
def test_invalid_configs_rejected(doc):
    with pytest.raises(ConfigError):
        parse_config(doc)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("- just\n- a list\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(bad)


def test_json_config_accepted(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY))
    assert load_config(p).epochs == 3


def test_with_updates_revalidates():
    cfg = parse_config(TINY)
    assert cfg.with_updates(optimizer__lr=0.2).optimizer.lr == 0.2
    with pytest.raises(Exception):
        cfg.with_updates(optimizer__lr=-1.0)
    assert cfg.with_depth(6).network.groups == [(6, 8)]


@pytest.mark.parametrize("grid", [{"p_L": []}, {"p_L": [1.2]}, {"p_L": [0.5], "seeds": []}, {"p_L": [0.5], "depths": [0]}])
def test_sweep_grid_validation(grid):
    with pytest.raises(ValueError):
        SweepGrid(**grid)


def test_train_smoke(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", write_cfg(tmp_path, TINY), "--out", str(out)]) == 0
    recs = records(out / "metrics.jsonl")
    assert [r["epoch"] for r in recs] == [0, 1, 2]
    fields = {"epoch", "train_loss", "val_error", "test_error", "mean_abs_grad_block1",
              "blocks_executed", "block_flops_saved_frac", "wall_seconds"}
    assert fields <= set(recs[0])
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary) == {"selected_epoch", "val_error", "test_error", "total_wall_seconds", "savings_frac"}
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1]) == summary
    assert (out / "summary.csv").exists()
    ckpt = json.loads((out / "checkpoint.json").read_text())
    assert ckpt["extra"]["selected_epoch"] == summary["selected_epoch"]


def test_train_is_reproducible(tmp_path):
    cfg = write_cfg(tmp_path, TINY)
    for name in ("a", "b"):
        assert main(["train", "--config", cfg, "--out", str(tmp_path / name)]) == 0
    a, b = (records(tmp_path / n / "metrics.jsonl") for n in "ab")
    for ra, rb in zip(a, b):
        ra.pop("wall_seconds"), rb.pop("wall_seconds")
        assert ra == rb


def test_seed_override_changes_run(tmp_path):
    cfg = write_cfg(tmp_path, TINY)
    main(["train", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["train", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "7"])
    la = [r["train_loss"] for r in records(tmp_path / "a" / "metrics.jsonl")]
    lb = [r["train_loss"] for r in records(tmp_path / "b" / "metrics.jsonl")]
    assert la != lb


def test_full_survival_matches_constant_summary(tmp_path):
    stoch = dict(TINY, schedule={"rule": "uniform", "p_L": 1.0})
    const = dict(TINY, mode="constant")
    for name, doc in (("s", stoch), ("c", const)):
        assert main(["train", "--config", write_cfg(tmp_path, doc, f"{name}.yaml"), "--out", str(tmp_path / name)]) == 0
    s, c = (json.loads((tmp_path / n / "summary.json").read_text()) for n in "sc")
    assert s["test_error"] == c["test_error"]
    assert s["selected_epoch"] == c["selected_epoch"]


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["fly"],
        ["train"],
        ["train", "--config", "/nonexistent/cfg.yaml"],
        ["check", "--only", "nonsense"],
        ["bench", "--repeats", "2"],
    ],
)
def test_usage_errors_exit_1(argv, capsys):
    try:
        code = main(argv)
    except SystemExit as exc:
        code = exc.code
    assert code == 1


def test_unknown_key_exit_1(tmp_path, capsys):
    assert main(["train", "--config", write_cfg(tmp_path, dict(TINY, epoch=3))]) == 1
    assert "epoch" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_3(tmp_path, capsys):
    doc = dict(TINY, optimizer={"lr": 1e200, "batch_size": 16, "weight_decay": 1.0}, mode="constant")
    assert main(["train", "--config", write_cfg(tmp_path, doc), "--out", str(tmp_path / "r")]) == 3
    assert "non-finite loss" in capsys.readouterr().err


def test_check_passes_on_fast_subset(capsys):
    assert main(["check", "--only", "schedule", "identity", "depth"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 3 and "3/3 checks passed" in out


def test_check_reports_gradient_tolerance(capsys):
    assert main(["check", "--only", "gradients"]) == 0
    out = capsys.readouterr().out
    line = next(l for l in out.splitlines() if "gradient correctness" in l)
    observed = float(line.split("observed ")[1].split()[0])
    assert observed < 1e-5 and "tolerance < 1e-05" in line


def test_corrupted_backward_fails_naming_layer(monkeypatch, capsys):
    real = layers.Dense.backward

    def broken(self, cache, dy):
        dx, dw, db = real(self, cache, dy)
        return dx, dw * 1.01, db

    monkeypatch.setattr(layers.Dense, "backward", broken)
    assert main(["check", "--only", "gradients"]) == 2
    out = capsys.readouterr().out
    assert "[FAIL] gradient correctness" in out
    assert "dense layer: rel error" in out


def test_sweep_cli(tmp_path, capsys):
    doc = {"base": dict(TINY, epochs=1), "grid": {"p_L": [0.5, 1.0], "rules": ["uniform", "linear_decay"], "seeds": [0]}}
    out = tmp_path / "sw"
    assert main(["sweep", "--config", write_cfg(tmp_path, doc), "--out", str(out)]) == 0
    rows = list(np.genfromtxt(out / "sweep.csv", delimiter=",", names=True, dtype=None, encoding=None))
    assert len(rows) == 4
    assert "4 sweep rows" in capsys.readouterr().out


CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_shipped_configs_match_presets():
    from stochdepth import presets
    from stochdepth.config import load_sweep_config

    assert load_config(CONFIGS / "spirals_L54.yaml") == presets.trend_config()
    assert load_config(CONFIGS / "bench_L54.yaml") == presets.bench_config()
    assert load_sweep_config(CONFIGS / "sweep_pL.yaml") == presets.sweep_config()
    assert load_config(CONFIGS / "smoke.yaml").epochs == 3
