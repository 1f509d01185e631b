"""Simulated parking lot: layout, placement, collisions and synchronised stepping."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .dynamics import (
    ActionCommand,
    DynamicsParams,
    NoiseCovariance,
    VehicleState,
    step_noise_batch,
    wrap_angle,
)
from .errors import ConfigError, UsageError

CONTROLLED = "controlled"
PARKED = "parked"
WALL_THICKNESS = 1.0
MAX_PLACEMENT_ATTEMPTS = 1000


@dataclass(frozen=True)
class Spot:
    x: float
    y: float
    orientation: float  # rad

    @property
    def center(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class LotConfig:
    """Rectangular lot ``[-width/2, width/2] x [-height/2, height/2]`` with parking spots."""

    width: float = 40.0
    height: float = 28.0
    spots: tuple[Spot, ...] = ()
    spot_length: float = 5.0
    spot_width: float = 2.5
    n_controlled: int = 2
    n_parked: int = 2

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("lot.width and lot.height must be > 0")
        if self.spot_length <= 0 or self.spot_width <= 0:
            raise ConfigError("lot.spot_length and lot.spot_width must be > 0")
        if self.n_controlled < 0 or self.n_parked < 0:
            raise ConfigError("lot vehicle counts must be >= 0")
        spots = tuple(s if isinstance(s, Spot) else Spot(*s) for s in self.spots)
        object.__setattr__(self, "spots", spots)
        geoms = [self.spot_geometry(i) for i in range(len(spots))]
        for i, g in enumerate(geoms):
            if not geometry_inside_lot(g, self.width, self.height, strict=False):
                raise ConfigError(f"lot.spots[{i}] is not inside the lot")
            for j in range(i):
                if _overlap_strict(g, geoms[j]):
                    raise ConfigError(f"lot.spots[{i}] overlaps lot.spots[{j}]")

    def spot_geometry(self, i: int) -> "CollisionGeometry":
        s = self.spots[i]
        return CollisionGeometry(s.x, s.y, self.spot_length / 2, self.spot_width / 2, s.orientation)


def scenario_lot(n_per_row: int, n_controlled: int, n_parked: int, pitch: float = 5.0,
                 width: float = 40.0, height: float = 28.0, row_offset: float = 9.0) -> LotConfig:
    """Two facing rows of perpendicular spots across a central aisle."""
    xs = [(i - (n_per_row - 1) / 2) * pitch for i in range(n_per_row)]
    spots = [Spot(x, -row_offset, -math.pi / 2) for x in xs]
    spots += [Spot(x, row_offset, math.pi / 2) for x in xs]
    return LotConfig(width=width, height=height, spots=tuple(spots),
                     n_controlled=n_controlled, n_parked=n_parked)


def scenario_1() -> LotConfig:
    return scenario_lot(3, n_controlled=2, n_parked=2)


def scenario_2() -> LotConfig:
    return scenario_lot(5, n_controlled=3, n_parked=3)


@dataclass(frozen=True)
class CollisionGeometry:
    """Oriented rectangle; ``half_length`` runs along ``angle``."""

    cx: float
    cy: float
    half_length: float
    half_width: float
    angle: float

    def __post_init__(self):
        if self.half_length <= 0 or self.half_width <= 0:
            raise ConfigError("collision half-extents must be > 0")

    def corners(self) -> np.ndarray:
        return rect_corners(np.array([self.cx, self.cy, self.half_length, self.half_width, self.angle]))


def rect_corners(rects: np.ndarray) -> np.ndarray:
    """Corners of rectangles given as rows ``[cx, cy, half_len, half_wid, angle]``, shape (..., 4, 2)."""
    r = np.asarray(rects, dtype=float)
    c, s = np.cos(r[..., 4]), np.sin(r[..., 4])
    ax = np.stack([c, s], axis=-1) * r[..., 2:3]
    ay = np.stack([-s, c], axis=-1) * r[..., 3:4]
    ctr = r[..., :2]
    return np.stack([ctr + ax + ay, ctr - ax + ay, ctr - ax - ay, ctr + ax - ay], axis=-2)


def rects_intersect(a: np.ndarray, b: np.ndarray, strict: bool = False) -> np.ndarray:
    """Vectorised separating-axis test between broadcastable rectangle arrays.

    Works on centres and half-extents: along each of the four candidate axes the boxes are
    apart when the centre gap exceeds the sum of their projected radii. Touching boundaries
    count as intersecting unless ``strict``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ca, sa = np.cos(a[..., 4]), np.sin(a[..., 4])
    cb, sb = np.cos(b[..., 4]), np.sin(b[..., 4])
    dx = b[..., 0] - a[..., 0]
    dy = b[..., 1] - a[..., 1]
    # cosines between the axes of a (u_a, v_a) and b (u_b, v_b)
    uu = np.abs(ca * cb + sa * sb)
    uv = np.abs(sa * cb - ca * sb)
    la, wa, lb, wb = a[..., 2], a[..., 3], b[..., 2], b[..., 3]
    gaps = (
        (np.abs(ca * dx + sa * dy), la + lb * uu + wb * uv),  # u_a
        (np.abs(-sa * dx + ca * dy), wa + lb * uv + wb * uu),  # v_a
        (np.abs(cb * dx + sb * dy), lb + la * uu + wa * uv),  # u_b
        (np.abs(-sb * dx + cb * dy), wb + la * uv + wa * uu),  # v_b
    )
    sep = False
    for gap, reach in gaps:
        sep = sep | ((gap >= reach) if strict else (gap > reach))
    return ~sep


def _as_row(g: CollisionGeometry) -> np.ndarray:
    return np.array([g.cx, g.cy, g.half_length, g.half_width, g.angle])


def check_collision(a: CollisionGeometry, b: CollisionGeometry) -> bool:
    return bool(rects_intersect(_as_row(a), _as_row(b)))


def _overlap_strict(a: CollisionGeometry, b: CollisionGeometry) -> bool:
    return bool(rects_intersect(_as_row(a), _as_row(b), strict=True))


def wall_rects(width: float, height: float) -> np.ndarray:
    """Four thin rectangles hugging the outside of the lot."""
    hw, hh, t = width / 2, height / 2, WALL_THICKNESS / 2
    return np.array([
        [0.0, hh + t, hw + 2 * t, t, 0.0],
        [0.0, -hh - t, hw + 2 * t, t, 0.0],
        [hw + t, 0.0, t, hh + 2 * t, 0.0],
        [-hw - t, 0.0, t, hh + 2 * t, 0.0],
    ])


def geometry_inside_lot(g: CollisionGeometry, width: float, height: float, strict: bool = True) -> bool:
    c = g.corners()
    hw, hh = width / 2, height / 2
    if strict:
        return bool(np.all(np.abs(c[:, 0]) < hw) and np.all(np.abs(c[:, 1]) < hh))
    return bool(np.all(np.abs(c[:, 0]) <= hw) and np.all(np.abs(c[:, 1]) <= hh))


def footprint_rects(states: np.ndarray, footprint: tuple[float, float], inflate: float = 0.0) -> np.ndarray:
    s = np.asarray(states, dtype=float)
    hl = np.full(s.shape[:-1], footprint[0] / 2 + inflate)
    hw = np.full(s.shape[:-1], footprint[1] / 2 + inflate)
    return np.stack([s[..., 0], s[..., 1], hl, hw, s[..., 4]], axis=-1)


def vehicle_geometry(s: VehicleState, footprint: tuple[float, float]) -> CollisionGeometry:
    return CollisionGeometry(s.x, s.y, footprint[0] / 2, footprint[1] / 2, s.h)


@dataclass(frozen=True)
class Vehicle:
    state: VehicleState
    role: str  # CONTROLLED or PARKED
    spot: Optional[int] = None  # origin spot (training) or destination spot (control)


@dataclass(frozen=True)
class TerminalEvent:
    kind: str  # "collision" | "boundary" | "max_steps"
    vehicles: tuple[int, ...] = ()


@dataclass(frozen=True)
class WorldState:
    lot: LotConfig
    vehicles: tuple[Vehicle, ...]
    step_count: int = 0
    terminal_event: Optional[TerminalEvent] = None
    max_steps: int = 100

    @property
    def terminal(self) -> bool:
        return self.terminal_event is not None

    @property
    def controlled(self) -> list[int]:
        return [i for i, v in enumerate(self.vehicles) if v.role == CONTROLLED]

    def states_array(self) -> np.ndarray:
        return np.stack([v.state.as_array() for v in self.vehicles]) if self.vehicles else np.zeros((0, 5))


def _spot_state(spot: Spot) -> VehicleState:
    return VehicleState(spot.x, spot.y, 0.0, 0.0, spot.orientation)


def _clear(rect: np.ndarray, others: list[np.ndarray], lot: LotConfig, margin: float) -> bool:
    g = CollisionGeometry(*rect)
    if not geometry_inside_lot(CollisionGeometry(g.cx, g.cy, g.half_length + margin,
                                                 g.half_width + margin, g.angle), lot.width, lot.height):
        return False
    inflated = rect.copy()
    inflated[2:4] += margin
    return not any(bool(rects_intersect(inflated, o)) for o in others)


def build_world(
    cfg: LotConfig,
    rng: Optional[np.random.Generator] = None,
    *,
    mode: str = "training",
    spots: Optional[Sequence[int]] = None,
    dynamics: Optional[DynamicsParams] = None,
    max_steps: int = 100,
    start_speed: tuple[float, float] = (0.0, 2.0),
    clearance: float = 1.0,
) -> WorldState:
    """Place vehicles in the lot.

    ``mode="training"``: every vehicle sits stationary in a distinct spot (controlled first,
    then parked). ``spots`` fixes the spot indices, otherwise they are drawn from ``rng``.

    ``mode="control"``: parked vehicles occupy spots, controlled vehicles get distinct free
    destination spots and random poses inside the lot, kept ``clearance`` metres from walls
    and other vehicles. ``spots`` fixes parked spots followed by destinations.
    """
    dyn = dynamics or DynamicsParams()
    n_c, n_p = cfg.n_controlled, cfg.n_parked
    n_spots = len(cfg.spots)
    if n_c + n_p > n_spots:
        raise ConfigError(f"{n_c + n_p} vehicles need distinct spots but the lot has {n_spots}")
    if max_steps < 1:
        raise ConfigError("max_steps must be >= 1")
    if spots is None:
        if rng is None:
            raise UsageError("random placement needs an rng")
        chosen = [int(i) for i in rng.permutation(n_spots)[: n_c + n_p]]
    else:
        chosen = [int(i) for i in spots]
        if len(chosen) != n_c + n_p or len(set(chosen)) != len(chosen) or not all(0 <= i < n_spots for i in chosen):
            raise ConfigError("fixed placement needs one distinct valid spot index per vehicle")

    if mode == "training":
        vehicles = [Vehicle(_spot_state(cfg.spots[i]), CONTROLLED, i) for i in chosen[:n_c]]
        vehicles += [Vehicle(_spot_state(cfg.spots[i]), PARKED, i) for i in chosen[n_c:]]
        return WorldState(cfg, tuple(vehicles), max_steps=max_steps)
    if mode != "control":
        raise ConfigError(f"unknown placement mode {mode!r}")
    if rng is None:
        raise UsageError("control placement needs an rng for poses")

    parked_spots, dest_spots = chosen[:n_p], chosen[n_p:]
    parked = [Vehicle(_spot_state(cfg.spots[i]), PARKED, i) for i in parked_spots]
    occupied = [footprint_rects(v.state.as_array(), dyn.footprint) for v in parked]
    controlled = []
    hw, hh = cfg.width / 2, cfg.height / 2
    for dest in dest_spots:
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            x = rng.uniform(-hw, hw)
            y = rng.uniform(-hh, hh)
            h = wrap_angle(rng.uniform(-math.pi, math.pi))
            v = rng.uniform(*start_speed)
            state = VehicleState(x, y, v * math.cos(h), v * math.sin(h), h)
            rect = footprint_rects(state.as_array(), dyn.footprint)
            if _clear(rect, occupied, cfg, clearance):
                break
        else:
            raise ConfigError(f"could not place a controlled vehicle after {MAX_PLACEMENT_ATTEMPTS} attempts")
        occupied.append(rect)
        controlled.append(Vehicle(state, CONTROLLED, dest))
    return WorldState(cfg, tuple(controlled + parked), max_steps=max_steps)


def detect_event(world: WorldState, footprint: tuple[float, float]) -> Optional[TerminalEvent]:
    """First collision or boundary contact involving a controlled vehicle, scanning by index."""
    states = world.states_array()
    if len(states) == 0:
        return None
    rects = footprint_rects(states, footprint)
    walls = wall_rects(world.lot.width, world.lot.height)
    for i in world.controlled:
        for j in range(len(rects)):
            if j == i or (world.vehicles[j].role == CONTROLLED and j < i):
                continue
            if rects_intersect(rects[i], rects[j]):
                return TerminalEvent("collision", tuple(sorted((i, j))))
        if np.any(rects_intersect(rects[i][None, :], walls)):
            return TerminalEvent("boundary", (i,))
    return None


def world_step(
    w: WorldState,
    actions: Sequence[ActionCommand],
    p: DynamicsParams,
    noise: NoiseCovariance,
    rng: np.random.Generator,
) -> WorldState:
    """Advance all controlled vehicles simultaneously, then check for terminal events."""
    if w.terminal:
        raise UsageError("cannot step a terminal world")
    idx = w.controlled
    if len(actions) != len(idx):
        raise UsageError(f"expected {len(idx)} actions, got {len(actions)}")
    lb, ub = p.lb, p.ub
    vehicles = list(w.vehicles)
    if idx:
        acts = np.stack([a.as_array() for a in actions])
        if np.any(acts < lb) or np.any(acts > ub):
            raise UsageError("action outside dynamics bounds")
        states = np.stack([vehicles[i].state.as_array() for i in idx])
        nxt = step_noise_batch(states, acts, p, noise.as_array(), rng)
        for k, i in enumerate(idx):
            vehicles[i] = replace(vehicles[i], state=VehicleState.from_array(nxt[k]))
    moved = replace(w, vehicles=tuple(vehicles), step_count=w.step_count + 1)
    event = detect_event(moved, p.footprint)
    if event is None and moved.step_count >= w.max_steps:
        event = TerminalEvent("max_steps")
    return replace(moved, terminal_event=event) if event else moved


@dataclass(frozen=True)
class ParkTolerance:
    pos: float = 0.5
    heading: float = 0.3
    speed: float = 0.5


def heading_error_mod_pi(h, orientation):
    """Absolute heading difference with nose-in and reverse-in treated as equal."""
    d = np.abs(wrap_angle(np.asarray(h) - orientation))
    out = np.minimum(d, math.pi - d)
    return float(out) if np.ndim(out) == 0 else out


def is_parked(s: VehicleState, spot: Spot, tol: ParkTolerance = ParkTolerance()) -> bool:
    return (
        math.hypot(s.x - spot.x, s.y - spot.y) <= tol.pos
        and heading_error_mod_pi(s.h, spot.orientation) <= tol.heading
        and s.speed <= tol.speed
    )

