from __future__ import annotations

import json
from pathlib import Path

import pytest

import main as cli
from attnpipe.config import SEED_ENV

DEFAULT_CONFIG = Path(__file__).resolve().parents[1] / "data" / "default_config.json"


@pytest.fixture(autouse=True)
def _no_seed_env(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)


def _run_dir(root: Path, command: str) -> Path:
    dirs = sorted(root.glob(f"*_{command}"))
    assert len(dirs) == 1
    return dirs[0]


def test_reproduce_thresholds(tmp_path, capsys):
    assert cli.main(["reproduce-thresholds", "--out", str(tmp_path)]) == cli.EXIT_OK
    run = _run_dir(tmp_path, "reproduce-thresholds")
    for name in ("config.json", "summary.json", "thresholds.csv", "thresholds.json"):
        assert (run / name).is_file()
    rows = json.loads((run / "thresholds.json").read_text())
    assert [r["n"] for r in rows] == [60, 45, 200]
    assert rows[0]["threshold"] == pytest.approx(0.6225, abs=5e-4)
    assert "threshold=0.6225" in capsys.readouterr().out


def test_reproduce_thresholds_with_sizes(tmp_path):
    assert cli.main(["reproduce-thresholds", "--out", str(tmp_path), "--n", "100", "--alpha", "0.01"]) == 0
    rows = json.loads((_run_dir(tmp_path, "reproduce-thresholds") / "thresholds.json").read_text())
    assert len(rows) == 1
    assert rows[0]["alpha"] == 0.01


def test_unknown_policy_exits_with_error_record(tmp_path, capsys):
    code = cli.main(["evaluate", "--out", str(tmp_path), "--policy", "random"])
    assert code == cli.EXIT_ERROR
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["error"] == "ConfigInvalid"
    assert record["details"]["field"] == "policy"
    assert not list(tmp_path.iterdir())


def test_missing_dataset_writes_error_json(tmp_path):
    assert cli.main(["evaluate", "--out", str(tmp_path)]) == cli.EXIT_ERROR
    run = _run_dir(tmp_path, "evaluate")
    record = json.loads((run / "error.json").read_text())
    assert record["details"]["field"] == "dataset_dir"
    assert (run / "config.json").is_file()


def test_config_init_writes_defaults(tmp_path):
    out = tmp_path / "attnpipe.json"
    assert cli.main(["config", "init", "-o", str(out)]) == 0
    assert json.loads(out.read_text()) == json.loads(DEFAULT_CONFIG.read_text())


def test_config_init_to_stdout(capsys):
    assert cli.main(["config", "init"]) == 0
    assert json.loads(capsys.readouterr().out) == json.loads(DEFAULT_CONFIG.read_text())


def test_simulate_overrides():
    args = cli.build_parser().parse_args(["simulate", "--participants", "3", "--null", "--no-gaze", "--seed", "4"])
    overrides = cli.overrides_from_args(args)
    assert overrides["seed"] == 4
    assert overrides["simulation"] == {
        "n_participants": 3,
        "seed": 4,
        "alpha_attenuation_pct": 0.0,
        "gaze_effect": False,
        "with_gaze": False,
    }


@pytest.mark.slow
def test_simulate_evaluate_and_psd(tmp_path):
    sim_root = tmp_path / "sim"
    assert cli.main(["simulate", "--out", str(sim_root), "--participants", "2", "--trials", "4"]) == 0
    dataset = _run_dir(sim_root, "simulate") / "dataset"
    assert (dataset / "sim.json").is_file()

    eval_root = tmp_path / "eval"
    argv = ["evaluate", "--out", str(eval_root), "--dataset", str(dataset), "--pipeline", "eeg,gaze,fusion"]
    assert cli.main([*argv, "--runs", "2"]) == 0
    run = _run_dir(eval_root, "evaluate")
    for name in ("overview.csv", "overview_display.csv", "validation.csv", "trial_sensitive_modality_comparison.json"):
        assert (run / name).is_file()
    summary = json.loads((run / "summary.json").read_text())
    assert set(summary) == {"trial_sensitive/eeg", "trial_sensitive/gaze", "trial_sensitive/fusion"}

    psd_root = tmp_path / "psd"
    assert cli.main(["psd", "--out", str(psd_root), "--dataset", str(dataset)]) == 0
    psd_run = _run_dir(psd_root, "psd")
    for name in ("psd_features.csv", "psd_minmax_bounds.csv", "psd_report.json"):
        assert (psd_run / name).is_file()
