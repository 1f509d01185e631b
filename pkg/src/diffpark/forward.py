"""Forward diffusion: chained noisy actions drive vehicles out of their spots until they crash."""
from __future__ import annotations

import json
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from .dynamics import (
    ActionCommand,
    DynamicsParams,
    NoiseCovariance,
    VehicleState,
    guidance_batch,
    reverse_batch,
)
from .errors import CollectionError, ConfigError, SchemaError, UsageError
from .world import LotConfig, WorldState, build_world, world_step

DATASET_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class NoiseSchedule:
    """Linearly growing action-noise std, per action dimension ``[throttle, steer]``."""

    sigma_min: tuple[float, ...] = (0.5, 0.02)
    sigma_max: tuple[float, ...] = (3.0, 0.3)
    T: int = 100

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.sigma_min, dtype=float))
        hi = np.atleast_1d(np.asarray(self.sigma_max, dtype=float))
        if lo.shape != hi.shape:
            raise ConfigError("schedule.sigma_min and schedule.sigma_max must have the same length")
        if np.any(lo < 0):
            raise ConfigError("schedule.sigma_min must be >= 0")
        if np.any(lo > hi):
            raise ConfigError("schedule.sigma_min must not exceed schedule.sigma_max")
        if self.T < 2:
            raise ConfigError("schedule.T must be >= 2")
        object.__setattr__(self, "sigma_min", tuple(float(v) for v in lo))
        object.__setattr__(self, "sigma_max", tuple(float(v) for v in hi))


def sigma_at(i: int, sched: NoiseSchedule):
    if not 0 <= i <= sched.T - 1:
        raise UsageError(f"step index {i} outside [0, {sched.T - 1}]")
    lo = np.asarray(sched.sigma_min)
    hi = np.asarray(sched.sigma_max)
    out = lo + (hi - lo) * (i / (sched.T - 1))
    return float(out[0]) if out.size == 1 else out


def sample_chained_action(prev, sigma, bounds, rng: np.random.Generator) -> ActionCommand:
    """Gaussian step around the previous action, clipped to ``bounds = (lb, ub)``."""
    prev_arr = prev.as_array() if isinstance(prev, ActionCommand) else np.asarray(prev, dtype=float)
    lb, ub = (np.asarray(b, dtype=float) for b in bounds)
    draw = prev_arr + np.asarray(sigma, dtype=float) * rng.standard_normal(prev_arr.shape)
    return ActionCommand.from_array(np.clip(draw, lb, ub))


@dataclass(frozen=True)
class TransitionRecord:
    trial_id: int
    vehicle_id: int
    t: int
    state: VehicleState
    theta: float
    l: float
    action: ActionCommand
    next_state: VehicleState

    def target_xy(self) -> tuple[float, float]:
        """Guidance target recovered from the stored bearing and distance."""
        return (self.state.x + self.l * math.cos(self.theta), self.state.y + self.l * math.sin(self.theta))


@dataclass
class TrajectoryDataset:
    records: list[TransitionRecord]
    meta: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def chains(self) -> dict[tuple[int, int], list[TransitionRecord]]:
        out: dict[tuple[int, int], list[TransitionRecord]] = {}
        for r in self.records:
            out.setdefault((r.trial_id, r.vehicle_id), []).append(r)
        return out

    def trial_ids(self) -> list[int]:
        return sorted({r.trial_id for r in self.records})

    def subset(self, trial_ids: Iterable[int]) -> "TrajectoryDataset":
        keep = set(trial_ids)
        return TrajectoryDataset([r for r in self.records if r.trial_id in keep], dict(self.meta))


def _run_trial(trial_id: int, cfg: LotConfig, sched: NoiseSchedule, dyn: DynamicsParams,
               noise: NoiseCovariance, seed: int, max_steps: int):
    rng = np.random.default_rng(seed + trial_id)
    world = build_world(cfg, rng, mode="training", dynamics=dyn, max_steps=max_steps)
    idx = world.controlled
    origins = {i: cfg.spots[world.vehicles[i].spot].center for i in idx}
    prev = {i: ActionCommand(0.0, 0.0) for i in idx}
    records = []
    bounds = (dyn.lb, dyn.ub)
    while not world.terminal:
        i_sched = min(world.step_count, sched.T - 1)
        sigma = sigma_at(i_sched, sched)
        actions = [sample_chained_action(prev[i], sigma, bounds, rng) for i in idx]
        nxt = world_step(world, actions, dyn, noise, rng)
        for k, i in enumerate(idx):
            s = world.vehicles[i].state
            g = guidance_batch(np.array([s.x, s.y]), np.asarray(origins[i]))
            records.append(TransitionRecord(trial_id, i, world.step_count, s, float(g[0]), float(g[1]),
                                            actions[k], nxt.vehicles[i].state))
            prev[i] = actions[k]
        world = nxt
    return records, world.terminal_event.kind


def collect(
    cfg: LotConfig,
    sched: NoiseSchedule,
    n_trials: int,
    seed: int,
    dynamics: Optional[DynamicsParams] = None,
    noise: Optional[NoiseCovariance] = None,
    max_steps: int = 100,
    threads: int = 1,
) -> TrajectoryDataset:
    """Run ``n_trials`` forward-diffusion episodes; trial ``k`` is seeded with ``seed + k``."""
    dyn = dynamics or DynamicsParams()
    noise = noise or NoiseCovariance()
    if sched.T > max_steps:
        raise ConfigError(f"schedule.T ({sched.T}) must not exceed max_steps ({max_steps})")
    if n_trials < 1:
        raise CollectionError("collection needs at least one trial")
    args = (cfg, sched, dyn, noise, seed, max_steps)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda k: _run_trial(k, *args), range(n_trials)))
    else:
        results = [_run_trial(k, *args) for k in range(n_trials)]
    records = [r for recs, _ in results for r in recs]
    if not records:
        raise CollectionError("no transitions were recorded")
    endings = Counter(kind for _, kind in results)
    meta = {
        "schedule": asdict(sched),
        "dynamics": asdict(dyn),
        "noise": asdict(noise),
        "lot": lot_to_dict(cfg),
        "seed": int(seed),
        "n_trials": int(n_trials),
        "max_steps": int(max_steps),
        "terminations": dict(sorted(endings.items())),
    }
    return TrajectoryDataset(records, meta)


def reverse_dataset(d: TrajectoryDataset, heading: str = "keep") -> TrajectoryDataset:
    """Re-emit every chain backwards in time with reversed states.

    Record ``S_t -a_t-> S_{t+1}`` becomes the rollback pair ``S'_{t+1} -> S'_t`` whose guidance
    is taken at ``S_{t+1}`` towards the same target. The forward action rides along as metadata.
    """
    out = []
    for (trial, vehicle), chain in d.chains().items():
        chain = sorted(chain, key=lambda r: r.t)
        for k, r in enumerate(reversed(chain)):
            tx, ty = r.target_xy()
            g = guidance_batch(np.array([r.next_state.x, r.next_state.y]), np.array([tx, ty]))
            out.append(TransitionRecord(
                trial, vehicle, k,
                VehicleState.from_array(reverse_batch(r.next_state.as_array(), heading)),
                float(g[0]), float(g[1]), r.action,
                VehicleState.from_array(reverse_batch(r.state.as_array(), heading)),
            ))
    meta = dict(d.meta)
    meta["reversed"] = not d.meta.get("reversed", False)
    meta["reversal_heading"] = heading
    return TrajectoryDataset(out, meta)


def rollback_arrays(d: TrajectoryDataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack a reversed dataset into ``(inputs, guidance, targets)`` arrays."""
    if not d.records:
        raise UsageError("dataset is empty")
    s = np.array([r.state.as_array() for r in d.records])
    g = np.array([[r.theta, r.l] for r in d.records])
    t = np.array([r.next_state.as_array() for r in d.records])
    return s, g, t


# ---------------------------------------------------------------- serialisation

def lot_to_dict(cfg: LotConfig) -> dict:
    d = asdict(cfg)
    d["spots"] = [[s.x, s.y, s.orientation] for s in cfg.spots]
    return d


def record_to_dict(r: TransitionRecord) -> dict:
    return {
        "trial_id": r.trial_id,
        "vehicle_id": r.vehicle_id,
        "t": r.t,
        "state": r.state.as_array().tolist(),
        "theta": r.theta,
        "l": r.l,
        "action": r.action.as_array().tolist(),
        "next_state": r.next_state.as_array().tolist(),
    }


RECORD_KEYS = ("trial_id", "vehicle_id", "t", "state", "theta", "l", "action", "next_state")


def record_from_dict(d: dict) -> TransitionRecord:
    if set(d) != set(RECORD_KEYS):
        raise SchemaError(f"record keys {sorted(d)} differ from {sorted(RECORD_KEYS)}")
    if len(d["state"]) != 5 or len(d["next_state"]) != 5 or len(d["action"]) != 2:
        raise SchemaError("state vectors need 5 entries and actions 2")
    return TransitionRecord(
        int(d["trial_id"]), int(d["vehicle_id"]), int(d["t"]),
        VehicleState.from_array(d["state"]), float(d["theta"]), float(d["l"]),
        ActionCommand.from_array(d["action"]), VehicleState.from_array(d["next_state"]),
    )


def dumps_dataset(d: TrajectoryDataset) -> str:
    header = {"kind": "header", "schema_version": DATASET_SCHEMA_VERSION, **d.meta}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(record_to_dict(r)) for r in d.records]
    return "\n".join(lines) + "\n"


def save_dataset(d: TrajectoryDataset, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_dataset(d))


def loads_dataset(text: str, source: str = "<string>") -> TrajectoryDataset:
    lines = text.splitlines()
    if not lines:
        raise SchemaError(f"{source}: empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{source}:1: header is not valid JSON ({exc.msg})") from exc
    if header.get("kind") != "header" or header.get("schema_version") != DATASET_SCHEMA_VERSION:
        raise SchemaError(f"{source}:1: missing or unsupported dataset header")
    meta = {k: v for k, v in header.items() if k not in ("kind", "schema_version")}
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            records.append(record_from_dict(json.loads(line)))
        except (json.JSONDecodeError, SchemaError, KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{source}:{lineno}: bad record ({exc})") from exc
    return TrajectoryDataset(records, meta)


def load_dataset(path) -> TrajectoryDataset:
    with open(path) as fh:
        return loads_dataset(fh.read(), str(path))


def termination_histogram(d: TrajectoryDataset) -> dict:
    return dict(d.meta.get("terminations", {}))


def check_chains(d: TrajectoryDataset) -> bool:
    """True when every (trial, vehicle) chain runs t = 0, 1, 2, ... in record order."""
    last: dict[tuple[int, int], int] = {}
    for r in d.records:
        key = (r.trial_id, r.vehicle_id)
        if r.t != last.get(key, -1) + 1:
            return False
        last[key] = r.t
    return True


def actions_in_bounds(d: TrajectoryDataset, dyn: DynamicsParams) -> bool:
    acts = np.array([r.action.as_array() for r in d.records])
    return bool(np.all(acts >= dyn.lb) and np.all(acts <= dyn.ub))


def group_sizes(d: TrajectoryDataset) -> Sequence[int]:
    return [len(c) for c in d.chains().values()]
