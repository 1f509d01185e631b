"""Shortest forward/reverse paths for a car with a minimum turning radius.

Lengths follow the closed-form path families for curvature-bounded motion in both
directions (straight segments and full-lock arcs, at most five pieces). Poses are
``(x, y, heading)`` of the reference point that moves tangent to the heading, which for
the bicycle model is the rear axle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import DynamicsParams

PI = math.pi
_EPS = 1e-10
_HALF = 0.5 * PI


def mod2pi(x):
    """Wrap to ``[-pi, pi]`` elementwise."""
    v = np.fmod(x, 2 * PI)
    v = v - 2 * PI * (v > PI)
    return v + 2 * PI * (v < -PI)


def min_turn_radius(dyn: DynamicsParams) -> float:
    """Rear-axle turning radius at full steer."""
    return dyn.length / math.tan(float(dyn.ub[1]))


def rear_axle(states, dyn: DynamicsParams) -> np.ndarray:
    """Map centre states (..., 5) to rear-axle poses (..., 3)."""
    s = np.asarray(states, dtype=float)
    lr = dyn.length / 2.0
    h = s[..., 4]
    return np.stack([s[..., 0] - lr * np.cos(h), s[..., 1] - lr * np.sin(h), h], axis=-1)


def centre_pose(poses, dyn: DynamicsParams) -> np.ndarray:
    """Inverse of :func:`rear_axle` for stationary states: (..., 3) -> (..., 5)."""
    p = np.asarray(poses, dtype=float)
    lr = dyn.length / 2.0
    out = np.zeros(p.shape[:-1] + (5,))
    out[..., 0] = p[..., 0] + lr * np.cos(p[..., 2])
    out[..., 1] = p[..., 1] + lr * np.sin(p[..., 2])
    out[..., 4] = p[..., 2]
    return out


# ---------------------------------------------------------------- path families
# Each family takes a goal (x, y, phi) in the unit-radius start frame and returns the
# signed piece lengths (t, u, v) together with a validity mask.

def _polar(x, y):
    return np.hypot(x, y), np.arctan2(y, x)


def _tau_omega(u, v, xi, eta, phi):
    d = mod2pi(u - v)
    a = np.sin(u) - np.sin(d)
    b = np.cos(u) - np.cos(d) - 1
    t1 = np.arctan2(eta * a - xi * b, xi * a + eta * b)
    t2 = 2 * (np.cos(d) - np.cos(v) - np.cos(u)) + 3
    tau = np.where(t2 < 0, mod2pi(t1 + PI), mod2pi(t1))
    return tau, mod2pi(tau - u + v - phi)


def _lsl(x, y, phi):
    u, t = _polar(x - np.sin(phi), y - 1 + np.cos(phi))
    v = mod2pi(phi - t)
    return (t, u, v), (t >= -_EPS) & (v >= -_EPS)


def _lsr(x, y, phi):
    u1, t1 = _polar(x + np.sin(phi), y - 1 - np.cos(phi))
    u1 = u1 * u1
    u = np.sqrt(np.maximum(u1 - 4, 0))
    t = mod2pi(t1 + np.arctan2(2, u))
    v = mod2pi(t - phi)
    return (t, u, v), (u1 >= 4) & (t >= -_EPS) & (v >= -_EPS)


def _lrl(x, y, phi):
    xi, eta = x - np.sin(phi), y - 1 + np.cos(phi)
    u1, th = _polar(xi, eta)
    u = -2 * np.arcsin(np.clip(0.25 * u1, -1, 1))
    t = mod2pi(th + 0.5 * u + PI)
    v = mod2pi(phi - t + u)
    return (t, u, v), (u1 <= 4) & (t >= -_EPS) & (u <= _EPS)


def _lrlr_a(x, y, phi):
    xi, eta = x + np.sin(phi), y - 1 - np.cos(phi)
    rho = 0.25 * (2 + np.hypot(xi, eta))
    u = np.arccos(np.clip(rho, -1, 1))
    t, v = _tau_omega(u, -u, xi, eta, phi)
    return (t, u, v), (rho <= 1) & (t >= -_EPS) & (v <= _EPS)


def _lrlr_b(x, y, phi):
    xi, eta = x + np.sin(phi), y - 1 - np.cos(phi)
    rho = (20 - xi * xi - eta * eta) / 16
    u = -np.arccos(np.clip(rho, -1, 1))
    t, v = _tau_omega(u, u, xi, eta, phi)
    return (t, u, v), (rho >= 0) & (rho <= 1) & (u >= -_HALF) & (t >= -_EPS) & (v >= -_EPS)


def _lrsl(x, y, phi):
    xi, eta = x - np.sin(phi), y - 1 + np.cos(phi)
    rho, th = _polar(xi, eta)
    r = np.sqrt(np.maximum(rho * rho - 4, 0))
    u = 2 - r
    t = mod2pi(th + np.arctan2(r, -2))
    v = mod2pi(phi - _HALF - t)
    return (t, u, v), (rho >= 2) & (t >= -_EPS) & (u <= _EPS) & (v <= _EPS)


def _lrsr(x, y, phi):
    xi, eta = x + np.sin(phi), y - 1 - np.cos(phi)
    rho, th = _polar(-eta, xi)
    t, u = th, 2 - rho
    v = mod2pi(t + _HALF - phi)
    return (t, u, v), (rho >= 2) & (t >= -_EPS) & (u <= _EPS) & (v <= _EPS)


def _lrslr(x, y, phi):
    xi, eta = x + np.sin(phi), y - 1 - np.cos(phi)
    rho = np.hypot(xi, eta)
    u = 4 - np.sqrt(np.maximum(rho * rho - 4, 0))
    t = mod2pi(np.arctan2((4 - u) * xi - 2 * eta, -2 * xi + (u - 4) * eta))
    v = mod2pi(t - phi)
    return (t, u, v), (rho >= 2) & (u <= _EPS) & (t >= -_EPS) & (v >= -_EPS)


# family -> (solver, piece layout as (kind, source) with source an index into (t, u, v)
# or a fixed signed quarter turn)
_FAMILIES = {
    "LSL": (_lsl, (("L", 0), ("S", 1), ("L", 2))),
    "LSR": (_lsr, (("L", 0), ("S", 1), ("R", 2))),
    "LRL": (_lrl, (("L", 0), ("R", 1), ("L", 2))),
    "LRLR_a": (_lrlr_a, (("L", 0), ("R", 1), ("L", -1), ("R", 2))),
    "LRLR_b": (_lrlr_b, (("L", 0), ("R", 1), ("L", 1), ("R", 2))),
    "LRSL": (_lrsl, (("L", 0), ("R", "-q"), ("S", 1), ("L", 2))),
    "LRSR": (_lrsr, (("L", 0), ("R", "-q"), ("S", 1), ("R", 2))),
    "LRSLR": (_lrslr, (("L", 0), ("R", "-q"), ("S", 1), ("L", "-q"), ("R", 2))),
}
_REVERSIBLE = ("LRL", "LRSL", "LRSR")
_MIRRORS = ((False, False), (True, False), (False, True), (True, True))  # (time flip, reflect)
_SWAP = {"L": "R", "R": "L", "S": "S"}


def _pieces(layout, t, u, v):
    tuv = (t, u, v)
    out = []
    for kind, src in layout:
        if src == "-q":
            out.append((kind, -_HALF))
        elif src == -1:
            out.append((kind, -tuv[1]))
        else:
            out.append((kind, tuv[src]))
    return out


def _variants(x, y, phi):
    """Yield (family, flip, reflect, backwards, X, Y, PHI) for every symmetric variant."""
    xb = x * np.cos(phi) + y * np.sin(phi)
    yb = x * np.sin(phi) - y * np.cos(phi)
    for name in _FAMILIES:
        for backwards in (False, True) if name in _REVERSIBLE else (False,):
            bx, by = (xb, yb) if backwards else (x, y)
            for flip, refl in _MIRRORS:
                yield (name, flip, refl, backwards,
                       -bx if flip else bx, -by if refl else by, -phi if flip != refl else phi)


def _unit_lengths(x, y, phi) -> np.ndarray:
    # all symmetric variants of one family are solved in a single stacked call
    x, y, phi = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, y, phi)))
    grouped: dict[str, list] = {}
    for name, _, _, _, X, Y, P in _variants(x, y, phi):
        grouped.setdefault(name, []).append((X, Y, P))
    best = np.full(x.shape, np.inf)
    for name, items in grouped.items():
        X, Y, P = (np.stack(v) for v in zip(*items))
        (t, u, v), ok = _FAMILIES[name][0](X, Y, P)
        n_pieces = len(_FAMILIES[name][1])
        total = np.abs(t) + np.abs(u) + np.abs(v)
        if name.startswith("LRLR"):
            total = total + np.abs(u)
        elif n_pieces == 4:
            total = total + _HALF
        elif n_pieces == 5:
            total = total + PI
        best = np.minimum(best, np.where(ok, total, np.inf).min(axis=0))
    return best


def _local(start, goal, radius):
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    dx = goal[..., 0] - start[..., 0]
    dy = goal[..., 1] - start[..., 1]
    c, s = np.cos(start[..., 2]), np.sin(start[..., 2])
    return (c * dx + s * dy) / radius, (-s * dx + c * dy) / radius, goal[..., 2] - start[..., 2]


def path_length(start, goal, radius: float) -> np.ndarray:
    """Shortest path length between poses (..., 3); inputs broadcast."""
    x, y, phi = _local(start, goal, radius)
    return _unit_lengths(x, y, phi) * radius


@dataclass(frozen=True)
class Piece:
    kind: str  # "L", "R" or "S"
    length: float  # signed, metres; negative means reversing


def shortest_path(start, goal, radius: float) -> list[Piece]:
    """Pieces of the shortest path from one pose to another."""
    x, y, phi = (float(v) for v in _local(start, goal, radius))
    grouped: dict[str, list] = {}
    for name, flip, refl, backwards, X, Y, P in _variants(x, y, phi):
        grouped.setdefault(name, []).append((flip, refl, backwards, X, Y, P))
    best, pick = np.inf, None
    for name, items in grouped.items():
        X, Y, P = (np.array([it[k] for it in items], dtype=float) for k in (3, 4, 5))
        (t, u, v), ok = _FAMILIES[name][0](X, Y, P)
        for i in np.flatnonzero(ok):
            pieces = _pieces(_FAMILIES[name][1], float(t[i]), float(u[i]), float(v[i]))
            total = sum(abs(p[1]) for p in pieces)
            if total < best - 1e-12:
                best, pick = total, (pieces, *items[i][:3])
    if pick is None:  # unreachable for finite input
        raise ValueError("no path found")
    pieces, flip, refl, backwards = pick
    if flip:
        pieces = [(k, -l) for k, l in pieces]
    if refl:
        pieces = [(_SWAP[k], l) for k, l in pieces]
    if backwards:
        pieces = pieces[::-1]
    return [Piece(k, l * radius) for k, l in pieces if abs(l) > 1e-12]


def advance(poses, curvature, distance):
    """Move poses (..., 3) along constant-curvature arcs by signed ``distance``."""
    p = np.asarray(poses, dtype=float)
    x, y, h = p[..., 0], p[..., 1], p[..., 2]
    k = np.asarray(curvature, dtype=float)
    d = np.asarray(distance, dtype=float)
    h2 = h + d * k
    straight = np.abs(k) < 1e-12
    ks = np.where(straight, 1.0, k)
    nx = np.where(straight, x + d * np.cos(h), x + (np.sin(h2) - np.sin(h)) / ks)
    ny = np.where(straight, y + d * np.sin(h), y - (np.cos(h2) - np.cos(h)) / ks)
    return np.stack([nx, ny, h2], axis=-1)


def sample_path(start, pieces: list[Piece], radius: float, step: float = 0.1) -> np.ndarray:
    """Poses along a path, shape (n, 4): x, y, heading and the travel direction into each point.

    The first row is the start with direction 0.
    """
    rows = [np.array([*np.asarray(start, dtype=float)[:3], 0.0])]
    pose = rows[0][:3]
    for piece in pieces:
        n = max(1, int(math.ceil(abs(piece.length) / step)))
        k = {"L": 1.0 / radius, "R": -1.0 / radius, "S": 0.0}[piece.kind]
        ds = piece.length / n * np.arange(1, n + 1)
        pts = advance(np.broadcast_to(pose, (n, 3)), k, ds)
        rows.extend(np.column_stack([pts, np.full(n, math.copysign(1.0, piece.length))]))
        pose = pts[-1]
    return np.array(rows)
