import json
from dataclasses import replace

import pytest

from diffpark.config import (
    CollectConfig,
    RunConfig,
    config_to_dict,
    dumps_config,
    load_config,
    loads_config,
    save_config,
)
from diffpark.errors import ConfigError
from diffpark.planner import PlannerConfig
from diffpark.world import scenario_2


def test_default_round_trip():
    cfg = RunConfig()
    assert loads_config(dumps_config(cfg)) == cfg


def test_custom_round_trip(tmp_path):
    cfg = RunConfig(seed=9, lot=scenario_2(), collect=CollectConfig(n_trials=5),
                    planner=PlannerConfig(horizon=7, jitter=(1.0, 0.1)))
    path = tmp_path / "c.json"
    save_config(cfg, path)
    assert load_config(path) == cfg
    assert dumps_config(load_config(path)) == dumps_config(cfg)


def test_unknown_key_is_named():
    d = config_to_dict(RunConfig())
    d["planner"]["horizn"] = 3
    with pytest.raises(ConfigError, match="planner: unknown key.*horizn"):
        loads_config(json.dumps(d))


def test_wrong_type_is_named():
    d = config_to_dict(RunConfig())
    d["train"]["epochs"] = "many"
    with pytest.raises(ConfigError, match="train.epochs"):
        loads_config(json.dumps(d))
    d = config_to_dict(RunConfig())
    d["planner"]["jitter"] = [0.5]
    with pytest.raises(ConfigError, match="planner.jitter"):
        loads_config(json.dumps(d))


def test_schema_version_and_json():
    d = config_to_dict(RunConfig())
    d["schema_version"] = 99
    with pytest.raises(ConfigError, match="schema_version"):
        loads_config(json.dumps(d))
    with pytest.raises(ConfigError, match="cfg.json:1"):
        loads_config("{oops", "cfg.json")


def test_cross_field_validation():
    with pytest.raises(ConfigError):
        RunConfig(seed=-1)
    with pytest.raises(ConfigError):
        replace(RunConfig(), collect=CollectConfig(max_steps=10))
    d = config_to_dict(RunConfig())
    d["preferences"]["beta"] = 0
    with pytest.raises(ConfigError, match="beta"):
        loads_config(json.dumps(d))


def test_partial_config_uses_defaults():
    cfg = loads_config(json.dumps({"schema_version": 1, "seed": 3}))
    assert cfg == replace(RunConfig(), seed=3)
