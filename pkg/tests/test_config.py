from __future__ import annotations

import json
import logging
from pathlib import Path

import pytest

from attnpipe.config import (
    SEED_ENV,
    RunConfig,
    clamp_tau,
    load_config,
    normalize_pipeline,
    normalize_policy,
    resolve_config,
    write_config,
)
from attnpipe.errors import ConfigInvalid
from attnpipe.evaluation import PipelineKind
from attnpipe.splits import SplitPolicy

DEFAULT_CONFIG = Path(__file__).resolve().parents[1] / "data" / "default_config.json"


@pytest.fixture
def config_file(tmp_path):
    def write(doc: dict) -> Path:
        path = tmp_path / "config.json"
        path.write_text(json.dumps(doc))
        return path

    return write


@pytest.mark.parametrize(
    ("text", "expected"),
    [
        ("trial_sensitive", SplitPolicy.TRIAL_SENSITIVE),
        ("Trial-Sensitive", SplitPolicy.TRIAL_SENSITIVE),
        ("oblivious", SplitPolicy.TRIAL_OBLIVIOUS),
        ("BCI", SplitPolicy.CHRONOLOGICAL),
        ("person-independent", SplitPolicy.LOSO),
    ],
)
def test_policy_aliases(text, expected):
    assert normalize_policy(text) is expected


def test_unknown_policy():
    with pytest.raises(ConfigInvalid) as err:
        normalize_policy("random")
    assert err.value.field == "policy"


def test_pipeline_aliases():
    assert normalize_pipeline("late-fusion") is PipelineKind.FUSION
    assert normalize_pipeline("Eye Tracking") is PipelineKind.GAZE
    with pytest.raises(ConfigInvalid):
        normalize_pipeline("svm")


def test_tau_is_clamped_with_warning(caplog):
    with caplog.at_level(logging.WARNING, logger="attnpipe.config"):
        assert clamp_tau(1.3) == 1.0
    assert "clamped" in caplog.text
    assert clamp_tau(0.2) == 0.5
    assert clamp_tau(0.8) == 0.8
    with pytest.raises(ConfigInvalid):
        clamp_tau("high")


def test_precedence_of_sources(config_file):
    path = config_file({"seed": 3})
    assert resolve_config(path, environ={}).seed == 3
    from_env = resolve_config(path, environ={SEED_ENV: "5"})
    assert from_env.seed == 5
    assert from_env.simulation.seed == 5
    assert resolve_config(path, overrides={"seed": 7}, environ={SEED_ENV: "5"}).seed == 7


def test_none_overrides_are_ignored(config_file):
    path = config_file({"n_runs": 4})
    assert resolve_config(path, overrides={"n_runs": None}, environ={}).n_runs == 4


def test_invalid_environment_seed():
    with pytest.raises(ConfigInvalid) as err:
        resolve_config(environ={SEED_ENV: "abc"})
    assert err.value.field == "seed"


@pytest.mark.parametrize(
    ("overrides", "field"),
    [
        ({"m_pairs": 9}, "m_pairs"),
        ({"n_runs": 0}, "n_runs"),
        ({"test_frac": 1.0}, "test_frac"),
        ({"policy": "random"}, "policy"),
        ({"hop": 0.0}, "hop"),
    ],
)
def test_invalid_values_name_their_field(overrides, field):
    with pytest.raises(ConfigInvalid) as err:
        resolve_config(overrides=overrides, environ={})
    assert err.value.field == field


def test_unknown_field_in_file(config_file):
    with pytest.raises(ConfigInvalid) as err:
        resolve_config(config_file({"n_folds": 5}), environ={})
    assert err.value.field == "n_folds"


def test_unsupported_format(config_file):
    with pytest.raises(ConfigInvalid) as err:
        load_config(config_file({"format": "attnpipe-config/0"}))
    assert err.value.field == "format"


def test_comma_separated_policies():
    cfg = resolve_config(overrides={"policy": "trial_sensitive, bci,trial"}, environ={})
    assert cfg.policies == (SplitPolicy.TRIAL_SENSITIVE, SplitPolicy.CHRONOLOGICAL)
    assert cfg.policies[0] is SplitPolicy.TRIAL_SENSITIVE


def test_preprocess_section_reaches_pipeline(config_file):
    cfg = resolve_config(config_file({"preprocess": {"transition": 4.0, "notch": None}}), environ={})
    assert cfg.preprocess.transition == 4.0
    assert cfg.preprocess.notch is None
    assert cfg.preprocess.l_freq == 3.0
    assert cfg.pipeline_spec().transition == 4.0


def test_simulation_section_is_merged(config_file):
    cfg = resolve_config(config_file({"simulation": {"n_participants": 3}}), environ={})
    assert cfg.simulation.n_participants == 3
    assert cfg.simulation.trials_per_condition == 20


def test_invalid_simulation_value(config_file):
    with pytest.raises(ConfigInvalid) as err:
        resolve_config(config_file({"simulation": {"trials_per_condition": 40}}), environ={})
    assert err.value.field == "simulation.trials_per_condition"
    with pytest.raises(ConfigInvalid) as err:
        resolve_config(config_file({"simulation": {"electrodes": 3}}), environ={})
    assert err.value.field == "simulation"


def test_bands_from_file(config_file):
    cfg = resolve_config(config_file({"bands": [{"name": "Alpha", "lo": 8, "hi": 13}]}), environ={})
    assert [b.name for b in cfg.bands] == ["Alpha"]
    spec = cfg.pipeline_spec("gaze")
    assert spec.kind is PipelineKind.GAZE
    assert spec.bands == cfg.bands


def test_bundled_default_config_matches_defaults():
    assert json.loads(DEFAULT_CONFIG.read_text()) == json.loads(json.dumps(RunConfig().to_dict()))


def test_written_config_loads_back(tmp_path):
    cfg = resolve_config(overrides={"pipeline": "fusion", "tau": 0.8, "m_pairs": 2}, environ={})
    path = write_config(cfg, tmp_path / "config.json")
    assert load_config(path) == cfg
