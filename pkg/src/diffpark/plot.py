"""Static SVG trajectory plots of control episodes."""
from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import quoteattr

import numpy as np

from .dynamics import DynamicsParams
from .planner import EpisodeResult
from .world import CONTROLLED, WorldState, footprint_rects, rect_corners

COLORS = ("#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b")
SCALE = 20.0  # px per metre
MARGIN = 20.0


def _poly(points: np.ndarray, to_px) -> str:
    return " ".join(f"{x:.2f},{y:.2f}" for x, y in (to_px(p) for p in points))


def episode_svg(world: WorldState, result: EpisodeResult, dyn: DynamicsParams = DynamicsParams(),
                title: str = "") -> str:
    """SVG 1.1 document: lot outline, spots, parked vehicles, one polyline per controlled vehicle."""
    lot = world.lot
    w_px = lot.width * SCALE + 2 * MARGIN
    h_px = lot.height * SCALE + 2 * MARGIN

    def to_px(p) -> tuple[float, float]:
        return ((p[0] + lot.width / 2) * SCALE + MARGIN, (lot.height / 2 - p[1]) * SCALE + MARGIN)

    out: list[str] = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w_px:.0f}" height="{h_px:.0f}" '
        f'viewBox="0 0 {w_px:.0f} {h_px:.0f}">',
    ]
    if title:
        out.append(f"<title>{_escape(title)}</title>")
    x0, y0 = to_px((-lot.width / 2, lot.height / 2))
    out.append(f'<rect x="{x0:.2f}" y="{y0:.2f}" width="{lot.width * SCALE:.2f}" height="{lot.height * SCALE:.2f}" '
               'fill="white" stroke="black" stroke-width="3"/>')
    for i in range(len(lot.spots)):
        g = lot.spot_geometry(i)
        corners = rect_corners(np.array([[g.cx, g.cy, g.half_length, g.half_width, g.angle]]))[0]
        out.append(f'<polygon class="spot" points="{_poly(corners, to_px)}" fill="none" stroke="#888" '
                   'stroke-dasharray="4,3"/>')
    for v in world.vehicles:
        if v.role == CONTROLLED:
            continue
        corners = rect_corners(footprint_rects(v.state.as_array()[None], dyn.footprint))[0]
        out.append(f'<polygon class="parked" points="{_poly(corners, to_px)}" fill="#999" stroke="#555"/>')
    for k, i in enumerate(world.controlled):
        color = COLORS[k % len(COLORS)]
        path = [row.state[:2] for row in result.trace if row.vehicle_id == i]
        start = world.vehicles[i].state.as_array()
        final = result.final_states[k]
        pts = np.array([start[:2], *path[1:], final[:2]]) if path else np.array([start[:2], final[:2]])
        out.append(f'<polyline class="trajectory" data-vehicle="{i}" points="{_poly(pts, to_px)}" fill="none" '
                   f'stroke="{color}" stroke-width="2"/>')
        sx, sy = to_px(start[:2])
        out.append(f'<circle class="start" cx="{sx:.2f}" cy="{sy:.2f}" r="5" fill="{color}"/>')
        spot = lot.spots[world.vehicles[i].spot]
        gx, gy = to_px(spot.center)
        out.append(f'<path class="goal" d="M {gx - 6:.2f} {gy - 6:.2f} L {gx + 6:.2f} {gy + 6:.2f} '
                   f'M {gx - 6:.2f} {gy + 6:.2f} L {gx + 6:.2f} {gy - 6:.2f}" stroke="{color}" stroke-width="3"/>')
        corners = rect_corners(footprint_rects(final[None], dyn.footprint))[0]
        out.append(f'<polygon class="final" points="{_poly(corners, to_px)}" fill="none" stroke="{color}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(text: str) -> str:
    return quoteattr(text)[1:-1]


def write_svg(path, world: WorldState, result: EpisodeResult, dyn: DynamicsParams = DynamicsParams(),
              title: str = "") -> None:
    with open(path, "w") as fh:
        fh.write(episode_svg(world, result, dyn, title))


def controlled_polylines(svg_text: str) -> Sequence[str]:
    """Helper for checks: the ``points`` attributes of all trajectory polylines."""
    import xml.etree.ElementTree as ET

    root = ET.fromstring(svg_text)
    ns = "{http://www.w3.org/2000/svg}"
    return [el.get("points") for el in root.iter(f"{ns}polyline") if el.get("class") == "trajectory"]
