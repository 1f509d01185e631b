"""Reference routes into a parking spot and a feedback tracker that follows them.

Routes come from a hybrid A* search over rear-axle poses against the static obstacles
(walls and parked cars), finished by an obstacle-checked shortest forward/reverse path
to the spot. A route is split into legs of constant travel direction; the tracker follows
one leg at a time with pure pursuit and a braking speed profile.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .dynamics import DynamicsParams, signed_speed
from .errors import ConfigError
from .reeds_shepp import (
    advance,
    centre_pose,
    min_turn_radius,
    mod2pi,
    path_length,
    rear_axle,
    sample_path,
    shortest_path,
)
from .world import Spot, footprint_rects, rects_intersect


@dataclass(frozen=True)
class RouteConfig:
    grid: float = 0.5  # search cell size, m
    heading_bins: int = 72
    step: float = 1.0  # arc length of one search motion, m
    reverse_cost: float = 1.0  # multiplier on reversing distance
    switch_cost: float = 3.0  # added per change of travel direction, m
    steer_cost: float = 0.2  # per metre at full lock
    inflate: float = 0.25  # clearance kept from static obstacles, m
    max_expansions: int = 3000
    detour_expansions: int = 800  # search budget when the other cars count as obstacles
    shot_every: int = 5  # try a direct finish every this many expansions
    lookahead: float = 2.0  # pure pursuit distance, m
    decel: float = 3.0  # braking used by the speed profile, m/s^2
    leg_done: float = 0.3  # remaining distance and speed below which a leg is finished
    max_offset: float = 1.0  # replan when the rear axle strays this far from the leg, m
    patience: int = 30  # steps spent yielding before replanning around the other cars
    retry_every: int = 10  # steps between attempts after a failed search

    def __post_init__(self):
        for name in ("grid", "step", "lookahead", "decel", "leg_done", "max_offset"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"planner.route.{name} must be > 0")
        if self.heading_bins < 4:
            raise ConfigError("planner.route.heading_bins must be >= 4")
        for name in ("reverse_cost", "switch_cost", "steer_cost", "inflate"):
            if getattr(self, name) < 0:
                raise ConfigError(f"planner.route.{name} must be >= 0")
        for name in ("max_expansions", "detour_expansions", "shot_every", "patience", "retry_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"planner.route.{name} must be >= 1")


@dataclass(frozen=True)
class Leg:
    poses: np.ndarray  # (n, 3) rear-axle poses
    arc: np.ndarray  # (n,) distance travelled from the leg start
    direction: float  # +1 forward, -1 reverse

    @property
    def length(self) -> float:
        return float(self.arc[-1])


@dataclass(frozen=True)
class Route:
    legs: tuple[Leg, ...]

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> "Route":
        """Split rows ``(x, y, heading, direction)`` into legs at direction changes."""
        d = samples[1:, 3]
        if not len(d):
            return cls((Leg(samples[:1, :3].copy(), np.zeros(1), 1.0),))
        cuts = [0] + [i for i in range(1, len(d)) if d[i] != d[i - 1]] + [len(d)]
        legs = []
        for a, b in zip(cuts[:-1], cuts[1:]):
            pts = samples[a:b + 1, :3]
            arc = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts[:, :2], axis=0).T))])
            legs.append(Leg(pts, arc, float(d[a])))
        return cls(tuple(legs))

    @property
    def length(self) -> float:
        return sum(leg.length for leg in self.legs)

    def length_after(self, i: int) -> float:
        return sum(leg.length for leg in self.legs[i + 1:])


def goal_poses(spot: Spot, dyn: DynamicsParams) -> np.ndarray:
    """Rear-axle poses that put the car centred in the spot, facing either way."""
    lr = dyn.length / 2.0
    out = []
    for h in (spot.orientation, spot.orientation + math.pi):
        out.append((spot.x - lr * math.cos(h), spot.y - lr * math.sin(h), float(mod2pi(h))))
    return np.array(out)


class Clearance:
    """Footprint test of rear-axle poses against fixed rectangles."""

    def __init__(self, obstacles, dyn: DynamicsParams, inflate: float = 0.0):
        self.obstacles = np.asarray(obstacles, dtype=float).reshape(-1, 5)
        self.dyn = dyn
        self.inflate = inflate

    def hits(self, poses) -> np.ndarray:
        p = np.asarray(poses, dtype=float).reshape(-1, 3)
        if not len(self.obstacles):
            return np.zeros(len(p), dtype=bool)
        rects = footprint_rects(centre_pose(p, self.dyn), self.dyn.footprint, self.inflate)
        return rects_intersect(rects[:, None, :], self.obstacles[None]).any(axis=1)


def plan_route(state, spot: Spot, obstacles, dyn: DynamicsParams, cfg: RouteConfig = RouteConfig()
               ) -> Optional[Route]:
    """Search a collision-free route from a centre state (5,) into ``spot``; ``None`` if none is found."""
    radius = min_turn_radius(dyn)
    start = rear_axle(np.asarray(state, dtype=float), dyn)
    goals = goal_poses(spot, dyn)
    inflate = cfg.inflate
    while inflate > 0.05 and Clearance(obstacles, dyn, inflate).hits(start)[0]:
        inflate /= 2  # starting inside the clearance band: search with a thinner one
    clear = Clearance(obstacles, dyn, inflate if inflate > 0.05 else 0.0)
    curv = np.tile(np.array([-1.0, -0.5, 0.0, 0.5, 1.0]) / radius, 2)
    dirs = np.repeat([1.0, -1.0], 5)
    n_sub = 4
    bin_w = 2 * math.pi / cfg.heading_bins

    def key(p):
        return (int(round(p[0] / cfg.grid)), int(round(p[1] / cfg.grid)),
                int(round(float(mod2pi(p[2])) / bin_w)) % cfg.heading_bins)

    def heuristic(p):
        return np.min(np.stack([path_length(p, g, radius) for g in goals]), axis=0)

    # node: pose, cost so far, parent, direction, samples of the motion that reached it
    nodes = [(start, 0.0, -1, 0.0, np.empty((0, 4)))]
    frontier = [(float(heuristic(start)), 0, 0)]
    closed = set()
    expanded = 0
    while frontier and expanded < cfg.max_expansions:
        f, _, ni = heapq.heappop(frontier)
        pose, g, _, d0, _ = nodes[ni]
        k = key(pose)
        if k in closed:
            continue
        closed.add(k)
        expanded += 1
        if expanded % cfg.shot_every == 1 or f - g < 8.0:
            pieces = min((shortest_path(pose, gl, radius) for gl in goals),
                         key=lambda ps: sum(abs(p.length) for p in ps))
            tail = sample_path(pose, pieces, radius, step=0.2)
            if not clear.hits(tail[:, :3]).any():
                chain = []
                j = ni
                while j >= 0:
                    chain.append(j)
                    j = nodes[j][2]
                parts = [np.array([[*start, 0.0]])] + [nodes[j][4] for j in chain[::-1][1:]] + [tail[1:]]
                return Route.from_samples(np.concatenate(parts))
        poses = np.broadcast_to(pose, (10, 3))
        subs = np.stack([advance(poses, curv, dirs * cfg.step * (i + 1) / n_sub) for i in range(n_sub)], axis=1)
        blocked = clear.hits(subs.reshape(-1, 3)).reshape(10, n_sub).any(axis=1)
        h_next = heuristic(subs[:, -1])
        for c in np.flatnonzero(~blocked):
            q = subs[c, -1]
            if key(q) in closed:
                continue
            cost = g + cfg.step * (1.0 if dirs[c] > 0 else cfg.reverse_cost)
            cost += cfg.switch_cost if (d0 != 0 and dirs[c] != d0) else 0.0
            cost += cfg.steer_cost * abs(curv[c]) * radius * cfg.step
            motion = np.column_stack([subs[c], np.full(n_sub, dirs[c])])
            nodes.append((q, cost, ni, dirs[c], motion))
            heapq.heappush(frontier, (cost + float(h_next[c]), len(nodes), len(nodes) - 1))
    return None


@dataclass
class Tracking:
    actions: np.ndarray  # (B, 2)
    remaining: np.ndarray  # (B,) distance left on the leg, negative once past its end
    offset: np.ndarray  # (B,) rear-axle distance to the nearest leg point


def track(states, leg: Leg, speed_cap, dyn: DynamicsParams, cfg: RouteConfig = RouteConfig()) -> Tracking:
    """Pure-pursuit steering and a braking speed profile along one leg, for states (B, 5)."""
    s = np.asarray(states, dtype=float).reshape(-1, 5)
    r = rear_axle(s, dyn)
    pts, arc, d = leg.poses, leg.arc, leg.direction
    dist = np.hypot(r[:, None, 0] - pts[None, :, 0], r[:, None, 1] - pts[None, :, 1])
    j = np.argmin(dist, axis=1)
    offset = dist[np.arange(len(s)), j]
    end_dir = d * np.array([math.cos(pts[-1, 2]), math.sin(pts[-1, 2])])
    past = (r[:, 0] - pts[-1, 0]) * end_dir[0] + (r[:, 1] - pts[-1, 1]) * end_dir[1]
    remaining = np.where(j == len(pts) - 1, -past, arc[-1] - arc[j])
    # lookahead point, continued straight beyond the leg end
    ahead = arc[j] + cfg.lookahead
    k = np.minimum(np.searchsorted(arc, np.minimum(ahead, arc[-1])), len(pts) - 1)
    over = np.maximum(ahead - arc[-1], 0.0)
    tx = pts[k, 0] + over * end_dir[0]
    ty = pts[k, 1] + over * end_dir[1]
    h_travel = r[:, 2] + (0.0 if d > 0 else math.pi)
    dx, dy = tx - r[:, 0], ty - r[:, 1]
    ld = np.maximum(np.hypot(dx, dy), 0.5)
    lateral = -np.sin(h_travel) * dx + np.cos(h_travel) * dy
    kappa = d * 2.0 * lateral / ld ** 2
    steer = np.clip(np.arctan(dyn.length * kappa), dyn.lb[1], dyn.ub[1])
    v_des = d * np.minimum(speed_cap, np.sqrt(2.0 * cfg.decel * np.maximum(remaining, 0.0)))
    throttle = np.clip((v_des - signed_speed(s)) / dyn.dt, dyn.lb[0], dyn.ub[0])
    return Tracking(np.stack([throttle, steer], axis=1), remaining, offset)


def cost_to_go(states, route: Route, leg_index: int, dyn: DynamicsParams, cfg: RouteConfig = RouteConfig()
               ) -> np.ndarray:
    """Distance still to drive along the route plus the offset from it."""
    tr = track(states, route.legs[leg_index], 0.0, dyn, cfg)
    return np.abs(tr.remaining) + route.length_after(leg_index) + tr.offset


class RouteFollower:
    """Keeps one vehicle's route current: plans, advances legs and replans when needed."""

    def __init__(self, spot: Spot, static_obstacles, dyn: DynamicsParams, cfg: RouteConfig = RouteConfig()):
        self.spot = spot
        self.static = np.asarray(static_obstacles, dtype=float).reshape(-1, 5)
        self.dyn = dyn
        self.cfg = cfg
        self.route: Optional[Route] = None
        self.leg = 0
        self.waited = 0
        self.since_plan = 0
        self.plans = 0

    def _plan(self, state, extra=None) -> bool:
        if extra is None or not len(extra):
            route = plan_route(state, self.spot, self.static, self.dyn, self.cfg)
        else:
            cfg = replace(self.cfg, max_expansions=self.cfg.detour_expansions)
            route = plan_route(state, self.spot, np.concatenate([self.static, extra]), self.dyn, cfg)
        self.since_plan = 0
        if route is None:
            return False
        self.route, self.leg, self.waited = route, 0, 0
        self.plans += 1
        return True

    def update(self, state, parked: bool, others=()) -> Optional[tuple[Route, int]]:
        """Return the route and active leg for ``state`` (5,), or ``None`` while no route exists."""
        s = np.asarray(state, dtype=float)
        self.since_plan += 1
        if self.route is None:
            if self.plans == 0 or self.since_plan >= self.cfg.retry_every:
                if not self._plan(s) and len(others):
                    self._plan(s, self._others(others))
            if self.route is None:
                return None
        slow = abs(float(signed_speed(s))) < self.cfg.leg_done
        tr = track(s, self.route.legs[self.leg], 0.0, self.dyn, self.cfg)
        if tr.remaining[0] < self.cfg.leg_done and slow and self.leg < len(self.route.legs) - 1:
            self.leg += 1
            tr = track(s, self.route.legs[self.leg], 0.0, self.dyn, self.cfg)
        last = self.leg == len(self.route.legs) - 1
        if tr.offset[0] > self.cfg.max_offset or (last and tr.remaining[0] < self.cfg.leg_done and slow
                                                  and not parked):
            self._plan(s)
        return self.route, self.leg

    def _others(self, others) -> np.ndarray:
        return footprint_rects(np.asarray(others, dtype=float).reshape(-1, 5), self.dyn.footprint)

    def record(self, state, yielding: bool, others=()) -> None:
        """Count steps spent yielding; past ``patience`` replan treating the others as fixed."""
        if yielding and self.route is not None and self.leg == len(self.route.legs) - 1:
            # slowing down for the end of the route is not giving way
            tr = track(np.asarray(state, dtype=float), self.route.legs[self.leg], 0.0, self.dyn, self.cfg)
            yielding = tr.remaining[0] > 2 * self.cfg.lookahead
        self.waited = self.waited + 1 if yielding else 0
        if self.waited > self.cfg.patience:
            self.waited = 0
            self._plan(np.asarray(state, dtype=float), self._others(others))
