"""Run configuration: one JSON file with every tunable of the pipeline."""
from __future__ import annotations

import dataclasses
import json
import math
import typing
from dataclasses import dataclass, field
from typing import Any, Optional

from .dynamics import DynamicsParams, NoiseCovariance
from .errors import ConfigError
from .forward import NoiseSchedule
from .planner import PlannerConfig, PreferenceWeights
from .predictor import TrainConfig
from .world import LotConfig, ParkTolerance, Spot, scenario_1

CONFIG_SCHEMA_VERSION = 1
REVERSAL_CHOICES = ("keep", "reflect")


@dataclass(frozen=True)
class CollectConfig:
    n_trials: int = 80
    max_steps: int = 100

    def __post_init__(self):
        if self.n_trials < 1:
            raise ConfigError("collect.n_trials must be >= 1")
        if self.max_steps < 1:
            raise ConfigError("collect.max_steps must be >= 1")


@dataclass(frozen=True)
class RunSettings:
    episodes: int = 1
    reversal_heading: str = "keep"  # how headings are treated when time-reversing the dataset

    def __post_init__(self):
        if self.episodes < 1:
            raise ConfigError("run.episodes must be >= 1")
        if self.reversal_heading not in REVERSAL_CHOICES:
            raise ConfigError(f"run.reversal_heading must be one of {REVERSAL_CHOICES}")


@dataclass(frozen=True)
class Paths:
    data: Optional[str] = None
    model: Optional[str] = None
    out: Optional[str] = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    lot: LotConfig = field(default_factory=scenario_1)
    dynamics: DynamicsParams = field(default_factory=DynamicsParams)
    noise: NoiseCovariance = field(default_factory=lambda: NoiseCovariance(4e-4, 4e-4, 2.5e-3, 2.5e-3, 1e-4))
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    collect: CollectConfig = field(default_factory=CollectConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    preferences: PreferenceWeights = field(default_factory=PreferenceWeights)
    tolerance: ParkTolerance = field(default_factory=ParkTolerance)
    run: RunSettings = field(default_factory=RunSettings)
    paths: Paths = field(default_factory=Paths)

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.schedule.T > self.collect.max_steps:
            raise ConfigError("schedule.T must not exceed collect.max_steps")


# ---------------------------------------------------------------- (de)serialisation

def _fail(path: str, msg: str):
    raise ConfigError(f"{path}: {msg}" if path else msg)


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            _fail(path, f"expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            _fail(path, f"expected {len(args)} entries, got {len(value)}")
        return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            _fail(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            _fail(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _fail(path, f"expected a number, got {value!r}")
        if not math.isfinite(value):
            _fail(path, "must be finite")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            _fail(path, f"expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: Any, path: str):
    if cls is Spot:
        if not isinstance(data, (list, tuple)) or len(data) != 3:
            _fail(path, "a spot is [x, y, orientation]")
        return Spot(*(_convert(float, v, f"{path}[{i}]") for i, v in enumerate(data)))
    if not isinstance(data, dict):
        _fail(path, f"expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        _fail(path, f"unknown key(s) {', '.join(unknown)}")
    kwargs = {k: _convert(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        _fail(path, str(exc))


def config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    version = d.get("schema_version")
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {CONFIG_SCHEMA_VERSION}, got {version!r}")
    body = {k: v for k, v in d.items() if k != "schema_version"}
    return _build(RunConfig, body, "")


def _plain(obj):
    if isinstance(obj, Spot):
        return [obj.x, obj.y, obj.orientation]
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.init}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def config_to_dict(cfg: RunConfig) -> dict:
    return {"schema_version": CONFIG_SCHEMA_VERSION, **_plain(cfg)}


def dumps_config(cfg: RunConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2) + "\n"


def loads_config(text: str, source: str = "<string>") -> RunConfig:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    return config_from_dict(d)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return loads_config(fh.read(), str(path))


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_config(cfg))
