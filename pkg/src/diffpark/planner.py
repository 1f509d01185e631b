"""Expected-free-energy planner on top of the motion predictor, with online adaptation."""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .dynamics import (
    ACTION_DIM,
    STATE_DIM,
    ActionCommand,
    DynamicsParams,
    NoiseCovariance,
    VehicleState,
    guidance_batch,
    step_batch,
    wrap_angle,
)
from .errors import ConfigError, TrainingError, UsageError
from .predictor import PredictorParams, TrainConfig, encode_batch, state_residual, train_arrays
from .route import Route, RouteConfig, RouteFollower, cost_to_go, track
from .world import (
    CONTROLLED,
    ParkTolerance,
    Spot,
    WorldState,
    footprint_rects,
    heading_error_mod_pi,
    is_parked,
    rects_intersect,
    wall_rects,
    world_step,
)

log = logging.getLogger(__name__)

OUTCOMES = ("parked", "collision", "timeout")
OTHERS_MOTION = ("static", "constant_velocity")
TRACE_COLUMNS = ("step", "vehicle_id", "x", "y", "vx", "vy", "h", "throttle", "steer", "efe", "pred_error", "adapted")


@dataclass(frozen=True)
class PreferenceWeights:
    beta: float = 1.0
    lambda_goal: float = 1.0
    lambda_safety: float = 0.2
    lambda_smooth: float = 0.1
    safety_radius: float = 10.0  # per-neighbour cap on the safety reward, m
    collision_penalty: float = 100.0  # charged per rollout step whose footprint touches an obstacle
    lateral_scale: float = 1.0  # weight of the offset across the spot axis in the goal distance
    heading_scale: float = 1.0  # weight of the heading error (rad) in the goal distance

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError("preferences.beta must be > 0")
        for name in ("lambda_goal", "lambda_safety", "lambda_smooth"):
            if getattr(self, name) < 0:
                raise ConfigError(f"preferences.{name} must be >= 0")
        if self.collision_penalty < 0:
            raise ConfigError("preferences.collision_penalty must be >= 0")
        if not self.safety_radius > 0:
            raise ConfigError("preferences.safety_radius must be > 0")


@dataclass(frozen=True)
class PlannerConfig:
    horizon: int = 15
    n_candidates: int = 4  # predictor-driven candidates
    n_rollouts: int = 2
    jitter: tuple[float, float] = (0.5, 0.05)  # std added to predictor means, [throttle, steer]
    vfe_error_threshold: float = 0.5
    adapt_buffer_size: int = 64
    adapt_epochs: int = 5
    adapt_lr: float = 1e-3
    anchor_weight: float = 1e-3
    max_steps: int = 300
    common_noise: bool = False  # score every candidate on the same rollout noise
    use_route: bool = True  # add route-following candidates and measure goal progress along the route
    speed_caps: tuple[float, ...] = (4.0, 2.0, 1.0, 0.0)  # one route-following candidate per cap, m/s
    others_motion: str = "constant_velocity"  # how other vehicles move inside rollouts
    hazard_margin: float = 0.4  # inflation of other vehicles' footprints in rollouts, m
    route: RouteConfig = field(default_factory=RouteConfig)

    def __post_init__(self):
        if self.horizon < 1 or self.n_candidates < 1 or self.n_rollouts < 1:
            raise ConfigError("planner.horizon, planner.n_candidates and planner.n_rollouts must be >= 1")
        if not self.vfe_error_threshold > 0:
            raise ConfigError("planner.vfe_error_threshold must be > 0")
        if len(self.jitter) != ACTION_DIM or min(self.jitter) < 0:
            raise ConfigError("planner.jitter needs two non-negative stds")
        if self.adapt_buffer_size < 1 or self.adapt_epochs < 1:
            raise ConfigError("planner.adapt_buffer_size and planner.adapt_epochs must be >= 1")
        if self.adapt_lr < 0 or self.anchor_weight < 0:
            raise ConfigError("planner.adapt_lr and planner.anchor_weight must be >= 0")
        if self.max_steps < 1:
            raise ConfigError("planner.max_steps must be >= 1")
        if self.use_route and not self.speed_caps:
            raise ConfigError("planner.speed_caps needs at least one entry when use_route is set")
        if any(c < 0 for c in self.speed_caps):
            raise ConfigError("planner.speed_caps must be >= 0")
        if self.others_motion not in OTHERS_MOTION:
            raise ConfigError(f"planner.others_motion must be one of {OTHERS_MOTION}")
        if self.hazard_margin < 0:
            raise ConfigError("planner.hazard_margin must be >= 0")
        object.__setattr__(self, "jitter", tuple(float(j) for j in self.jitter))
        object.__setattr__(self, "speed_caps", tuple(float(c) for c in self.speed_caps))


# ---------------------------------------------------------------- preferences

def _goal_pose(goal) -> np.ndarray:
    """Goal as ``(x, y, orientation)``; a bare position gets ``nan`` orientation (heading ignored)."""
    if isinstance(goal, Spot):
        return np.array([goal.x, goal.y, goal.orientation])
    g = np.asarray(goal, dtype=float).ravel()
    if g.size == 2:
        return np.array([g[0], g[1], np.nan])
    return g[:3].copy()


def _action_scale(dyn: DynamicsParams) -> np.ndarray:
    return 0.5 * (dyn.ub - dyn.lb)


def goal_distance(s, goal_pose, lateral_scale: float = 1.0, heading_scale: float = 1.0) -> np.ndarray:
    """Distance from states (..., 5) to the stationary goal state.

    Position, velocity and heading error (modulo pi, so either parking direction counts)
    all enter the norm. The position offset is split along and across the spot axis so the
    cross-axis part can be weighted. With a bare-position goal the heading term is dropped.
    """
    s = np.asarray(s, dtype=float)
    dx = s[..., 0] - goal_pose[0]
    dy = s[..., 1] - goal_pose[1]
    v2 = s[..., 2] ** 2 + s[..., 3] ** 2
    if np.isnan(goal_pose[2]):
        return np.sqrt(dx * dx + dy * dy + v2)
    c, sn = math.cos(goal_pose[2]), math.sin(goal_pose[2])
    along = c * dx + sn * dy
    across = -sn * dx + c * dy
    he = heading_error_mod_pi(s[..., 4], goal_pose[2])
    return np.sqrt(along ** 2 + (lateral_scale * across) ** 2 + v2 + (heading_scale * he) ** 2)


@dataclass(frozen=True)
class RouteGuide:
    """Active route of one vehicle: the goal term becomes the distance left along it."""

    route: Route
    leg: int
    dyn: DynamicsParams
    cfg: RouteConfig = RouteConfig()

    def distance(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=float)
        d = cost_to_go(s.reshape(-1, STATE_DIM), self.route, self.leg, self.dyn, self.cfg)
        return d.reshape(s.shape[:-1])

    def actions(self, states, speed_cap) -> np.ndarray:
        return track(states, self.route.legs[self.leg], speed_cap, self.dyn, self.cfg).actions


def reward_batch(s_next, goal_pose, neighbors_xy, a, a_prev, w: PreferenceWeights, dyn: DynamicsParams,
                 hazard=None, guide: Optional[RouteGuide] = None) -> np.ndarray:
    """Vectorised reward over leading batch dims of ``s_next`` (..., 5) and ``a`` (..., 2).

    ``neighbors_xy`` has shape (n, 2); the action difference is measured in units of the
    bound half-widths. ``hazard`` is an optional (n_rects, 5) array of obstacle rectangles;
    states whose footprint touches one lose ``w.collision_penalty``. With a ``guide`` the
    goal distance is the distance left along its route.
    """
    s = np.asarray(s_next, dtype=float)
    pos = s[..., :2]
    if guide is not None:
        r = -w.lambda_goal * guide.distance(s)
    else:
        r = -w.lambda_goal * goal_distance(s, goal_pose, w.lateral_scale, w.heading_scale)
    nb = np.asarray(neighbors_xy, dtype=float).reshape(-1, 2)
    if len(nb) and w.lambda_safety:
        d = np.linalg.norm(pos[..., None, :] - nb, axis=-1)
        r = r + w.lambda_safety * np.minimum(d, w.safety_radius).sum(axis=-1)
    if w.lambda_smooth:
        da = (np.asarray(a, dtype=float) - np.asarray(a_prev, dtype=float)) / _action_scale(dyn)
        r = r - w.lambda_smooth * np.linalg.norm(da, axis=-1)
    if hazard is not None and w.collision_penalty:
        r = r - w.collision_penalty * footprint_hits(s, hazard, dyn)
    return r


def footprint_hits(states, hazard, dyn: DynamicsParams) -> np.ndarray:
    """Whether each state's footprint (..., 5) touches any of the (n_rects, 5) hazard rectangles."""
    s = np.asarray(states, dtype=float)
    hazard = np.asarray(hazard, dtype=float).reshape(-1, 5)
    if not len(hazard):
        return np.zeros(s.shape[:-1], dtype=bool)
    rects = footprint_rects(s.reshape(-1, STATE_DIM), dyn.footprint)
    hit = rects_intersect(rects[:, None, :], hazard[None, :, :]).any(axis=1)
    return hit.reshape(s.shape[:-1])


def reward(s_next: VehicleState, goal, neighbors: Sequence[VehicleState], a: ActionCommand,
           a_prev: ActionCommand, w: PreferenceWeights, dyn: Optional[DynamicsParams] = None) -> float:
    nb = np.array([[n.x, n.y] for n in neighbors]).reshape(-1, 2)
    return float(reward_batch(s_next.as_array(), _goal_pose(goal), nb, a.as_array(), a_prev.as_array(),
                              w, dyn or DynamicsParams()))


def log_preference(rewards, beta: float) -> float:
    """Negative log-preference of a trajectory, ``-beta * sum(rewards)``."""
    if not beta > 0:
        raise UsageError("beta must be > 0")
    return -beta * float(np.sum(rewards))


def transition_entropy(Sigma) -> float:
    """Differential entropy of the diagonal Gaussian transition noise."""
    return 0.5 * float(np.sum(np.log(2.0 * math.pi * math.e * np.asarray(Sigma, dtype=float))))


def action_entropy(sigma) -> np.ndarray:
    return 0.5 * np.sum(np.log(2.0 * math.pi * math.e * np.asarray(sigma) ** 2), axis=-1)


# ---------------------------------------------------------------- rollouts

@dataclass
class Rollout:
    states: np.ndarray  # (N + 1, 5)
    actions: np.ndarray  # (N, 2)
    rewards: np.ndarray  # (N,)
    entropies: np.ndarray  # (N,)

    @property
    def horizon(self) -> int:
        return len(self.rewards)


def _sample_actions(p: PredictorParams, states, goal_pose, jitter, z_jit, z_pol, dyn: DynamicsParams):
    mean, sigma, _ = encode_batch(p, states, guidance_batch(states[..., :2], goal_pose[:2]), dyn)
    acts = mean + np.asarray(jitter) * z_jit + sigma * z_pol
    return np.clip(acts, dyn.lb, dyn.ub), sigma


def rollout_batch(p: PredictorParams, s0, goal_pose, neighbors_xy, horizon: int, a_prev, first_actions,
                  noise: dict, jitter, w: PreferenceWeights, dyn: DynamicsParams, hazard=None,
                  guide: Optional[RouteGuide] = None, speed_caps=None):
    """Simulate ``B`` rollouts at once.

    ``first_actions`` (B, 2) pins step 0 when given. ``noise`` holds standard-normal draws:
    ``jit`` and ``pol`` of shape (B, N, 2) for the action, ``trans`` of shape (B, N, 5).
    ``neighbors_xy`` and ``hazard`` are either fixed, (n, 2) and (n_rects, 5), or given per
    step with a leading axis of length N. With a ``guide``, rows whose ``speed_caps`` entry
    is not ``nan`` follow its route at that cap instead of sampling the predictor.
    Returns states (B, N+1, 5), actions (B, N, 2), rewards (B, N), entropies (B, N) and the
    per-step action entropies (B, N). A rollout whose footprint touches a ``hazard`` rectangle
    pays the collision penalty on that step and every later one.
    """
    s = np.array(s0, dtype=float)
    B = s.shape[0]
    states = np.empty((B, horizon + 1, STATE_DIM))
    actions = np.empty((B, horizon, ACTION_DIM))
    rewards = np.empty((B, horizon))
    a_ent = np.full((B, horizon), np.nan)
    states[:, 0] = s
    prev = np.broadcast_to(np.asarray(a_prev, dtype=float), (B, ACTION_DIM))
    Sigma = p.Sigma
    crashed = np.zeros(B, dtype=bool)
    nb_seq = np.asarray(neighbors_xy, dtype=float)
    hz_seq = None if hazard is None else np.asarray(hazard, dtype=float)
    caps = np.full(B, np.nan) if speed_caps is None or guide is None else np.asarray(speed_caps, dtype=float)
    routed = ~np.isnan(caps)
    sampled = ~routed
    for t in range(horizon):
        a = np.empty((B, ACTION_DIM))
        if sampled.any():
            a[sampled], sigma = _sample_actions(p, s[sampled], goal_pose, jitter, noise["jit"][sampled, t],
                                                noise["pol"][sampled, t], dyn)
            a_ent[sampled, t] = action_entropy(sigma)
        if routed.any():
            a[routed] = guide.actions(s[routed], caps[routed])
        if t == 0 and first_actions is not None:
            a = np.asarray(first_actions, dtype=float)
        s = step_batch(s, a, dyn) + noise["trans"][:, t] * np.sqrt(Sigma)
        s[:, 4] = wrap_angle(s[:, 4])
        nb = nb_seq[t] if nb_seq.ndim == 3 else nb_seq
        rewards[:, t] = reward_batch(s, goal_pose, nb, a, prev, w, dyn, guide=guide)
        if hz_seq is not None and w.collision_penalty:
            # a crash ends the episode, so it is charged on every remaining step
            crashed |= footprint_hits(s, hz_seq[t] if hz_seq.ndim == 3 else hz_seq, dyn)
            rewards[:, t] -= w.collision_penalty * crashed
        states[:, t + 1] = s
        actions[:, t] = a
        prev = a
    ent = np.full((B, horizon), transition_entropy(Sigma))
    return states, actions, rewards, ent, a_ent


def _draw_noise(rng: np.random.Generator, n: int, horizon: int) -> dict:
    return {
        "jit": rng.standard_normal((n, horizon, ACTION_DIM)),
        "pol": rng.standard_normal((n, horizon, ACTION_DIM)),
        "trans": rng.standard_normal((n, horizon, STATE_DIM)),
    }


def rollout(p: PredictorParams, s: VehicleState, goal, others: Sequence[VehicleState], horizon: int,
            rng: np.random.Generator, jitter=(0.0, 0.0), w: PreferenceWeights = PreferenceWeights(),
            dyn: Optional[DynamicsParams] = None, a_prev: Optional[ActionCommand] = None,
            hazard=None) -> Rollout:
    """One generative rollout; other vehicles are held where they are."""
    if horizon < 1:
        raise UsageError("horizon must be >= 1")
    dyn = dyn or DynamicsParams()
    nb = np.array([[o.x, o.y] for o in others]).reshape(-1, 2)
    prev = np.zeros(ACTION_DIM) if a_prev is None else a_prev.as_array()
    st, ac, rw, en, _ = rollout_batch(p, s.as_array()[None], _goal_pose(goal), nb, horizon, prev, None,
                                      _draw_noise(rng, 1, horizon), jitter, w, dyn, hazard)
    return Rollout(st[0], ac[0], rw[0], en[0])


def efe_values(rewards, entropies, beta: float) -> np.ndarray:
    """Mean over rollouts (axis -2) of the summed per-step ``-beta * R + H`` (axis -1)."""
    rewards = np.asarray(rewards, dtype=float)
    entropies = np.asarray(entropies, dtype=float)
    if rewards.shape != entropies.shape:
        raise UsageError("reward and entropy traces differ in shape")
    return np.mean(np.sum(-beta * rewards + entropies, axis=-1), axis=-1)


def efe(rollouts: Sequence[Rollout], w: PreferenceWeights) -> float:
    if not rollouts:
        raise UsageError("need at least one rollout")
    n = rollouts[0].horizon
    if any(r.horizon != n for r in rollouts):
        raise UsageError("rollouts have mismatched horizons")
    return float(efe_values(np.stack([r.rewards for r in rollouts]), np.stack([r.entropies for r in rollouts]), w.beta))


def predict_others(others, horizon: int, dyn: DynamicsParams, motion: str = "static", margin: float = 0.0):
    """Positions (N, n, 2) and inflated footprints (N, n, 5) of other vehicles over the horizon.

    ``motion="static"`` holds them in place; ``"constant_velocity"`` moves each along its
    current velocity. ``margin`` is a scalar or one value per vehicle.
    """
    if motion not in OTHERS_MOTION:
        raise UsageError(f"unknown motion model {motion!r}")
    S = np.asarray(others, dtype=float).reshape(-1, STATE_DIM)
    seq = np.repeat(S[None], horizon, axis=0)
    if motion == "constant_velocity":
        t = dyn.dt * np.arange(1, horizon + 1)[:, None]
        seq[..., 0] += S[None, :, 2] * t
        seq[..., 1] += S[None, :, 3] * t
    rects = footprint_rects(seq.reshape(-1, STATE_DIM), dyn.footprint).reshape(horizon, len(S), 5)
    rects[..., 2:4] += np.broadcast_to(np.asarray(margin, dtype=float), (len(S),))[None, :, None]
    return seq[..., :2], rects


def select_action(
    s: VehicleState,
    goal,
    others: Sequence[VehicleState],
    p: PredictorParams,
    cfg: PlannerConfig,
    w: PreferenceWeights,
    rng: np.random.Generator,
    dyn: Optional[DynamicsParams] = None,
    a_prev: Optional[ActionCommand] = None,
    candidates: Optional[np.ndarray] = None,
    hazard: Optional[np.ndarray] = None,
    guide: Optional[RouteGuide] = None,
    moving: Optional[Sequence[bool]] = None,
) -> tuple[ActionCommand, dict]:
    """Pick the candidate first action with the lowest expected free energy.

    Candidates are drawn from the predictor (plus jitter) unless given explicitly; with a
    ``guide`` one route-following candidate per entry of ``cfg.speed_caps`` is appended.
    Every candidate is scored with the same number of rollouts. Ties go to the lowest
    index. ``hazard`` holds fixed obstacle rectangles (walls, say); the footprints of
    ``others``, moved by ``cfg.others_motion`` and inflated by ``cfg.hazard_margin``, are
    added to it. ``moving`` flags which of ``others`` may move; the margin is only applied to
    those (all of them by default).
    """
    dyn = dyn or DynamicsParams()
    K, M, N = cfg.n_candidates, cfg.n_rollouts, cfg.horizon
    if candidates is not None:
        candidates = np.asarray(candidates, dtype=float).reshape(-1, ACTION_DIM)
        K = len(candidates)
    caps = np.asarray(cfg.speed_caps if guide is not None else (), dtype=float)
    if K + len(caps) < 1:
        raise UsageError("need at least one candidate")
    goal_pose = _goal_pose(goal)
    other_arr = np.array([o.as_array() for o in others]).reshape(-1, STATE_DIM)
    margin = cfg.hazard_margin if moving is None else cfg.hazard_margin * np.asarray(moving, dtype=float)
    nb, other_rects = predict_others(other_arr, N, dyn, cfg.others_motion, margin)
    hz = other_rects
    if hazard is not None:
        fixed = np.asarray(hazard, dtype=float).reshape(-1, 5)
        hz = np.concatenate([other_rects, np.broadcast_to(fixed, (N,) + fixed.shape)], axis=1)
    prev = np.zeros(ACTION_DIM) if a_prev is None else a_prev.as_array()
    s0 = s.as_array()
    # candidate k follows the predictor with a jitter offset held over its whole horizon
    cand_jit = rng.standard_normal((K, ACTION_DIM))
    cand_pol = rng.standard_normal((K, ACTION_DIM))
    if candidates is None:
        candidates, _ = _sample_actions(p, np.tile(s0, (K, 1)), goal_pose, cfg.jitter, cand_jit, cand_pol, dyn)
    if len(caps):
        candidates = np.concatenate([candidates, guide.actions(np.tile(s0, (len(caps), 1)), caps)])
        cand_jit = np.concatenate([cand_jit, np.zeros((len(caps), ACTION_DIM))])
    n_all = len(candidates)
    if cfg.common_noise:
        shared = _draw_noise(rng, M, N)
        noise = {k: np.tile(v, (n_all, 1, 1)) for k, v in shared.items()}
        # one held offset for every predictor candidate, so equal first actions score equally
        cand_jit[:K] = rng.standard_normal(ACTION_DIM)
    else:
        noise = _draw_noise(rng, n_all * M, N)
    noise["jit"] = np.broadcast_to(np.repeat(cand_jit, M, axis=0)[:, None, :], (n_all * M, N, ACTION_DIM))
    first = np.repeat(candidates, M, axis=0)
    row_caps = np.repeat(np.concatenate([np.full(K, np.nan), caps]), M)
    _, _, rw, en, a_ent = rollout_batch(p, np.tile(s0, (n_all * M, 1)), goal_pose, nb, N, prev, first, noise,
                                        cfg.jitter, w, dyn, hz, guide, row_caps)
    G = efe_values(rw.reshape(n_all, M, N), en.reshape(n_all, M, N), w.beta)
    best = int(np.argmin(G))
    ent = a_ent.reshape(n_all, M * N).mean(axis=1)  # nan for route-following candidates
    diag = {
        "efe": G,
        "candidates": candidates,
        "chosen": best,
        "n_predictor": K,
        "speed_caps": caps,
        "action_entropy": ent,
    }
    return ActionCommand.from_array(candidates[best]), diag


# ---------------------------------------------------------------- adaptation

@dataclass(frozen=True)
class BufferItem:
    state: np.ndarray
    guidance: np.ndarray
    next_state: np.ndarray


def buffer_arrays(buffer: Sequence[BufferItem]):
    return (np.array([b.state for b in buffer]), np.array([b.guidance for b in buffer]),
            np.array([b.next_state for b in buffer]))


def vfe_adapt(
    p: PredictorParams,
    buffer: Sequence[BufferItem],
    lr: float = 1e-3,
    epochs: int = 5,
    dyn: Optional[DynamicsParams] = None,
    anchor_weight: float = 1e-3,
    train_cfg: TrainConfig = TrainConfig(),
    seed: int = 0,
) -> tuple[PredictorParams, bool]:
    """Fine-tune on recent transitions with an L2 pull towards the current parameters.

    Returns ``(params, ok)``; on a non-finite loss the original parameters come back with
    ``ok=False``.
    """
    if not buffer:
        raise UsageError("adaptation buffer is empty")
    dyn = dyn or DynamicsParams()
    data = buffer_arrays(buffer)
    cfg = replace(train_cfg, epochs=epochs, lr=lr, seed=seed, batch_size=max(len(buffer), 1))
    try:
        new, _ = train_arrays(data, data, cfg, dyn, init=p, anchor_weight=anchor_weight)
    except TrainingError as exc:
        log.warning("adaptation aborted: %s", exc)
        return p, False
    return new, True


def buffer_mse(p: PredictorParams, buffer: Sequence[BufferItem], dyn: DynamicsParams) -> float:
    """One-step MSE of the decoder at the predictor's mean action over the buffer."""
    S, G, T = buffer_arrays(buffer)
    mean, _, _ = encode_batch(p, S, G, dyn)
    return float(np.mean(state_residual(step_batch(S, mean, dyn), T) ** 2))


# ---------------------------------------------------------------- episodes

@dataclass
class TraceRow:
    step: int
    vehicle_id: int
    state: np.ndarray
    action: np.ndarray
    efe: float
    pred_error: float
    adapted: bool


@dataclass
class EpisodeResult:
    trace: list[TraceRow]
    outcome: str
    steps: int
    adaptations: int
    final_states: np.ndarray
    parked: list[bool]
    seed: Optional[int] = None
    event: Optional[str] = None
    adapt_events: list[int] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "outcome": self.outcome,
            "steps": self.steps,
            "adaptations": self.adaptations,
            "adapt_steps": list(self.adapt_events),
            "seed": self.seed,
            "event": self.event,
            "parked": [bool(b) for b in self.parked],
            "final_states": self.final_states.tolist(),
        }


def all_parked(world: WorldState, tol: ParkTolerance) -> list[bool]:
    return [is_parked(world.vehicles[i].state, world.lot.spots[world.vehicles[i].spot], tol)
            for i in world.controlled]


def run_episode(
    world: WorldState,
    p: PredictorParams,
    cfg: PlannerConfig,
    w: PreferenceWeights,
    tol: ParkTolerance,
    rng: np.random.Generator,
    dyn: Optional[DynamicsParams] = None,
    noise: Optional[NoiseCovariance] = None,
    seed: Optional[int] = None,
    adapt: bool = True,
) -> EpisodeResult:
    """Plan and act for every controlled vehicle until all are parked, one crashes, or time runs out."""
    if world.terminal:
        raise UsageError("episode needs a non-terminal world")
    dyn = dyn or DynamicsParams()
    noise = noise or NoiseCovariance()
    world = replace(world, max_steps=cfg.max_steps)
    idx = world.controlled
    prev = {i: ActionCommand(0.0, 0.0) for i in idx}
    buffer: deque[BufferItem] = deque(maxlen=cfg.adapt_buffer_size)
    trace: list[TraceRow] = []
    adapt_steps: list[int] = []
    walls = wall_rects(world.lot.width, world.lot.height)
    followers: dict[int, RouteFollower] = {}
    if cfg.use_route:
        fixed = [k for k, v in enumerate(world.vehicles) if k not in idx]
        static = np.concatenate([footprint_rects(world.states_array()[fixed], dyn.footprint), walls])
        followers = {i: RouteFollower(world.lot.spots[world.vehicles[i].spot], static, dyn, cfg.route) for i in idx}
    parked = all_parked(world, tol)
    while not all(parked) and not world.terminal:
        states = [world.vehicles[i].state for i in idx]
        actions, efes = [], []
        for k, i in enumerate(idx):
            others = [v.state for j, v in enumerate(world.vehicles) if j != i]
            moving = [v.role == CONTROLLED for j, v in enumerate(world.vehicles) if j != i]
            goal = world.lot.spots[world.vehicles[i].spot]
            guide = None
            if cfg.use_route:
                movers = [world.vehicles[j].state.as_array() for j in idx if j != i]
                active = followers[i].update(states[k].as_array(), parked[k], movers)
                if active is not None:
                    guide = RouteGuide(active[0], active[1], dyn, cfg.route)
            a, diag = select_action(states[k], goal, others, p, cfg, w, rng, dyn, prev[i], hazard=walls,
                                    guide=guide, moving=moving)
            if guide is not None:
                # anything but the fastest route candidate counts as giving way
                followers[i].record(states[k].as_array(), diag["chosen"] != diag["n_predictor"] and not parked[k],
                                    movers)
            actions.append(a)
            efes.append(float(diag["efe"][diag["chosen"]]))
        nxt = world_step(world, actions, dyn, noise, rng)
        adapted = False
        errors = []
        for k, i in enumerate(idx):
            s0 = states[k].as_array()
            s1 = nxt.vehicles[i].state.as_array()
            expected = step_batch(s0, actions[k].as_array(), dyn)
            errors.append(float(np.mean(state_residual(expected, s1) ** 2)))
            goal_xy = np.array(world.lot.spots[world.vehicles[i].spot].center)
            buffer.append(BufferItem(s0, guidance_batch(s0[:2], goal_xy), s1))
            prev[i] = actions[k]
        if adapt and max(errors) > cfg.vfe_error_threshold:
            p, adapted = vfe_adapt(p, list(buffer), cfg.adapt_lr, cfg.adapt_epochs, dyn, cfg.anchor_weight,
                                   seed=world.step_count)
            if adapted:
                adapt_steps.append(world.step_count)
        for k, i in enumerate(idx):
            trace.append(TraceRow(world.step_count, i, states[k].as_array(), actions[k].as_array(),
                                  efes[k], errors[k], adapted))
        world = nxt
        if world.terminal_event is None or world.terminal_event.kind == "max_steps":
            parked = all_parked(world, tol)
    if all(parked):
        outcome = "parked"
    elif world.terminal_event is not None and world.terminal_event.kind in ("collision", "boundary"):
        outcome = "collision"
    else:
        outcome = "timeout"
    return EpisodeResult(
        trace, outcome, world.step_count, len(adapt_steps), world.states_array()[idx], parked, seed,
        world.terminal_event.kind if world.terminal_event else None, adapt_steps,
    )


# ---------------------------------------------------------------- output files

def write_trace_csv(result: EpisodeResult, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for r in result.trace:
            writer.writerow([r.step, r.vehicle_id, *(repr(float(v)) for v in r.state),
                             *(repr(float(v)) for v in r.action), repr(r.efe), repr(r.pred_error), int(r.adapted)])


def write_summary_json(result: EpisodeResult, path) -> None:
    with open(path, "w") as fh:
        json.dump(result.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")
