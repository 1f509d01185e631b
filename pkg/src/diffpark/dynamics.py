"""Stochastic kinematic bicycle model, state reversal and guidance features.

All batch functions take state arrays of shape ``(..., 5)`` laid out as
``[x, y, vx, vy, h]`` and action arrays of shape ``(..., 2)`` laid out as
``[throttle, steer]``. The dataclass wrappers are thin conveniences over them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError

STATE_DIM = 5
ACTION_DIM = 2
STATE_FIELDS = ("x", "y", "vx", "vy", "h")
TWO_PI = 2.0 * math.pi


def wrap_angle(a):
    """Map angles to [-pi, pi). Values already in range are returned untouched."""
    a = np.asarray(a, dtype=float)
    inside = (a >= -math.pi) & (a < math.pi)
    wrapped = np.mod(a + math.pi, TWO_PI) - math.pi
    # mod can round up to exactly pi
    wrapped = np.where(wrapped >= math.pi, wrapped - TWO_PI, wrapped)
    out = np.where(inside, a, wrapped)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    vx: float
    vy: float
    h: float  # heading, rad, in [-pi, pi)

    def __post_init__(self):
        vals = (self.x, self.y, self.vx, self.vy, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise DomainError(f"non-finite vehicle state {vals}")
        object.__setattr__(self, "h", wrap_angle(self.h))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.vx, self.vy, self.h], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "VehicleState":
        a = np.asarray(arr, dtype=float).reshape(STATE_DIM)
        return cls(*(float(v) for v in a))

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)


@dataclass(frozen=True)
class ActionCommand:
    throttle: float  # m/s^2
    steer: float  # front-wheel angle, rad

    def as_array(self) -> np.ndarray:
        return np.array([self.throttle, self.steer], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "ActionCommand":
        a = np.asarray(arr, dtype=float).reshape(ACTION_DIM)
        return cls(float(a[0]), float(a[1]))


@dataclass(frozen=True)
class DynamicsParams:
    dt: float = 0.1
    length: float = 5.0
    v_max: float = 10.0
    throttle_bounds: tuple[float, float] = (-5.0, 5.0)
    steer_bounds: tuple[float, float] = (-math.pi / 4, math.pi / 4)
    footprint: tuple[float, float] = (5.0, 2.0)  # length x width, m

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dynamics.dt must be > 0")
        if not self.length > 0:
            raise ConfigError("dynamics.length must be > 0")
        if not self.v_max > 0:
            raise ConfigError("dynamics.v_max must be > 0")
        for name in ("throttle_bounds", "steer_bounds"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ConfigError(f"dynamics.{name}: lower bound must be < upper bound")
            object.__setattr__(self, name, (float(lo), float(hi)))
        lo, hi = self.steer_bounds
        if lo <= -math.pi / 2 or hi >= math.pi / 2:
            raise ConfigError("dynamics.steer_bounds must lie inside (-pi/2, pi/2)")
        if min(self.footprint) <= 0:
            raise ConfigError("dynamics.footprint extents must be > 0")
        object.__setattr__(self, "footprint", tuple(float(v) for v in self.footprint))

    @property
    def lb(self) -> np.ndarray:
        return np.array([self.throttle_bounds[0], self.steer_bounds[0]])

    @property
    def ub(self) -> np.ndarray:
        return np.array([self.throttle_bounds[1], self.steer_bounds[1]])

    def contains(self, a: ActionCommand) -> bool:
        arr = a.as_array()
        return bool(np.all(arr >= self.lb) and np.all(arr <= self.ub))


@dataclass(frozen=True)
class NoiseCovariance:
    """Diagonal transition-noise variances, one per state element."""

    x: float = 0.0
    y: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    h: float = 0.0

    def __post_init__(self):
        for name in STATE_FIELDS:
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"noise.{name} must be a finite variance >= 0")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.vx, self.vy, self.h], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "NoiseCovariance":
        return cls(*(float(v) for v in np.asarray(arr, dtype=float).reshape(STATE_DIM)))


@dataclass(frozen=True)
class GuidanceFeatures:
    theta: float  # world-frame bearing to target, rad
    l: float  # distance to target, m


def slip_angle(steer):
    """Slip angle at the mass centre, ``arctan(tan(steer) / 2)``."""
    s = np.asarray(steer, dtype=float)
    if np.any(np.abs(s) >= math.pi / 2):
        raise DomainError("steering angle must lie in (-pi/2, pi/2)")
    out = np.arctan(0.5 * np.tan(s))
    return float(out) if out.ndim == 0 else out


def _slip_angle_derivative(steer: np.ndarray) -> np.ndarray:
    t = np.tan(steer)
    return 0.5 * (1.0 + t * t) / (1.0 + 0.25 * t * t)


def signed_speed(states: np.ndarray) -> np.ndarray:
    """Speed projected onto the heading; negative when reversing."""
    return states[..., 2] * np.cos(states[..., 4]) + states[..., 3] * np.sin(states[..., 4])


def step_batch(states, actions, params: DynamicsParams) -> np.ndarray:
    """Deterministic bicycle step for arrays of states and actions."""
    s = np.asarray(states, dtype=float)
    a = np.asarray(actions, dtype=float)
    x, y, h = s[..., 0], s[..., 1], s[..., 4]
    v = signed_speed(s)
    beta = np.arctan(0.5 * np.tan(a[..., 1]))
    dt = params.dt
    h_raw = h + v * np.sin(beta) / (params.length / 2.0) * dt
    v_new = np.clip(v + a[..., 0] * dt, -params.v_max, params.v_max)
    out = np.empty(np.broadcast_shapes(s.shape, a.shape[:-1] + (STATE_DIM,)))
    out[..., 0] = x + v * np.cos(h + beta) * dt
    out[..., 1] = y + v * np.sin(h + beta) * dt
    out[..., 2] = v_new * np.cos(h_raw)
    out[..., 3] = v_new * np.sin(h_raw)
    out[..., 4] = wrap_angle(h_raw)
    return out


def step_action_jacobian(states, actions, params: DynamicsParams) -> np.ndarray:
    """Partial derivatives of ``step_batch`` output w.r.t. the action, shape (..., 5, 2).

    The throttle column is zero where the speed clamp is active.
    """
    s = np.asarray(states, dtype=float)
    a = np.asarray(actions, dtype=float)
    h = s[..., 4]
    v = signed_speed(s)
    steer = a[..., 1]
    beta = np.arctan(0.5 * np.tan(steer))
    dbeta = _slip_angle_derivative(steer)
    dt = params.dt
    half_l = params.length / 2.0
    h_raw = h + v * np.sin(beta) / half_l * dt
    v_pre = v + a[..., 0] * dt
    v_new = np.clip(v_pre, -params.v_max, params.v_max)
    active = (v_pre > -params.v_max) & (v_pre < params.v_max)

    dh = v * np.cos(beta) * dbeta / half_l * dt
    jac = np.zeros(np.broadcast_shapes(s.shape, a.shape[:-1] + (STATE_DIM,)) + (ACTION_DIM,))
    jac[..., 0, 1] = -v * np.sin(h + beta) * dt * dbeta
    jac[..., 1, 1] = v * np.cos(h + beta) * dt * dbeta
    jac[..., 2, 0] = np.where(active, dt * np.cos(h_raw), 0.0)
    jac[..., 3, 0] = np.where(active, dt * np.sin(h_raw), 0.0)
    jac[..., 2, 1] = -v_new * np.sin(h_raw) * dh
    jac[..., 3, 1] = v_new * np.cos(h_raw) * dh
    jac[..., 4, 1] = dh
    return jac


def step_noise_batch(states, actions, params: DynamicsParams, variances, rng) -> np.ndarray:
    """Stochastic step: deterministic step plus independent Gaussian noise per element."""
    det = step_batch(states, actions, params)
    std = np.sqrt(np.asarray(variances, dtype=float))
    eps = rng.standard_normal(det.shape)
    out = det + eps * std
    out[..., 4] = wrap_angle(out[..., 4])
    return out


def step_deterministic(s: VehicleState, a: ActionCommand, p: DynamicsParams) -> VehicleState:
    return VehicleState.from_array(step_batch(s.as_array(), a.as_array(), p))


def step_stochastic(
    s: VehicleState, a: ActionCommand, p: DynamicsParams, noise: NoiseCovariance, rng
) -> VehicleState:
    out = step_noise_batch(s.as_array(), a.as_array(), p, noise.as_array(), rng)
    return VehicleState.from_array(out)


REVERSAL_MODES = ("keep", "reflect")


def reverse_batch(states, heading: str = "keep") -> np.ndarray:
    """Time-reverse states: velocity negated, heading kept or reflected to ``pi - h``.

    ``"reflect"`` is the literal reflection; ``"keep"`` leaves the heading as is so the
    reversed trajectory is itself a bicycle-model trajectory driven backwards.
    """
    if heading not in REVERSAL_MODES:
        raise ValueError(f"heading must be one of {REVERSAL_MODES}, got {heading!r}")
    out = np.array(states, dtype=float, copy=True)
    out[..., 2] = -out[..., 2]
    out[..., 3] = -out[..., 3]
    if heading == "reflect":
        out[..., 4] = wrap_angle(math.pi - out[..., 4])
    return out


def reverse_state(s: VehicleState, heading: str = "keep") -> VehicleState:
    return VehicleState.from_array(reverse_batch(s.as_array(), heading))


def guidance_batch(positions, targets) -> np.ndarray:
    """Bearing and distance from each position to its target, shape (..., 2) as [theta, l]."""
    p = np.asarray(positions, dtype=float)
    t = np.asarray(targets, dtype=float)
    dx = t[..., 0] - p[..., 0]
    dy = t[..., 1] - p[..., 1]
    dist = np.hypot(dx, dy)
    theta = np.where(dist > 0, wrap_angle(np.arctan2(dy, dx)), 0.0)
    return np.stack([theta, dist], axis=-1)


def guidance(s: VehicleState, target_xy) -> GuidanceFeatures:
    g = guidance_batch(np.array([s.x, s.y]), np.asarray(target_xy, dtype=float))
    return GuidanceFeatures(theta=float(g[0]), l=float(g[1]))
