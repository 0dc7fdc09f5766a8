import json

import pytest

from coopalign.config import (
    BENCHMARK_METHODS,
    ConfigError,
    EncoderConfig,
    ExperimentConfig,
    ScenarioParams,
    SWEEP_METHODS,
    config_from_dict,
    load_config,
)


def test_defaults_are_valid():
    cfg = ExperimentConfig()
    spec = cfg.grid_spec()
    assert spec.width == 32 and spec.height == 32
    assert abs(spec.resolution - 1.25) < 1e-12
    assert set(cfg.methods) <= set(BENCHMARK_METHODS)
    assert SWEEP_METHODS == ("gt-noise", "pgc", "none")


def test_round_trip_through_dict():
    cfg = ExperimentConfig(seed=7, num_scenarios=3, frames=2)
    back = config_from_dict(cfg.to_dict())
    assert back.to_dict() == cfg.to_dict()
    assert back.seed == 7 and back.num_scenarios == 3 and back.frames == 2


def test_unknown_keys_rejected():
    raw = ExperimentConfig().to_dict()
    raw["bogus"] = 1
    with pytest.raises(ConfigError):
        config_from_dict(raw)
    raw = ExperimentConfig().to_dict()
    raw["scenario"]["bogus"] = 1
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_bad_values_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig(num_scenarios=0)
    with pytest.raises(ConfigError):
        ExperimentConfig(methods=("teleport",))
    with pytest.raises(ConfigError):
        ExperimentConfig(noise_levels=((1.0, -1.0),))
    with pytest.raises(ConfigError):
        ScenarioParams(num_agents=0)
    with pytest.raises(ConfigError):
        ScenarioParams(co_visible=9, num_objects=8)
    with pytest.raises(ConfigError):
        EncoderConfig(dim=7)
    with pytest.raises(ConfigError):
        EncoderConfig(mode="magic")
    raw = ExperimentConfig().to_dict()
    raw["seed"] = "zero"
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_load_config_from_file(tmp_path):
    path = tmp_path / "cfg.json"
    raw = ExperimentConfig(seed=11).to_dict()
    path.write_text(json.dumps(raw))
    cfg = load_config(path)
    assert cfg.seed == 11
    assert load_config(None).seed == 0
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_partial_override_dict():
    cfg = config_from_dict({"seed": 5, "scenario": {"num_objects": 4}})
    assert cfg.seed == 5
    assert cfg.scenario.num_objects == 4
    # untouched groups keep their defaults
    assert cfg.scenario.sensing_range == 25.0
    assert cfg.encoder.mode == "passthrough"
