"""Static bird's-eye-view SVG of a fused scene.

CAVs are pink, other road users yellow; every box is labelled with its id and
its fill opacity follows the fused confidence. Output is byte-stable for
identical inputs (fixed number formatting, no timestamps).
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

from .fusion import FusedObject
from .geometry import box_corners
from .scenario import CavState

CAV_FILL = "#ff69b4"
OTHER_FILL = "#ffd700"
DEFAULT_EXTENT = (4.5, 2.0)


def _f(v: float) -> str:
    return f"{v:.2f}"


def _bounds(points, margin: float):
    if not points:
        return -50.0, -50.0, 50.0, 50.0
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    return min(xs) - margin, min(ys) - margin, max(xs) + margin, max(ys) + margin


def bev_svg(fused: Sequence[FusedObject], states: Sequence[CavState], scale: float = 4.0,
            margin: float = 10.0, cav_extent=DEFAULT_EXTENT) -> str:
    """Render to an SVG string. World +y (North) points up on the canvas."""
    pts = [s.position for s in states] + [f.location for f in fused]
    xmin, ymin, xmax, ymax = _bounds(pts, margin)
    width, height = (xmax - xmin) * scale, (ymax - ymin) * scale

    def to_px(p):
        return (p[0] - xmin) * scale, (ymax - p[1]) * scale

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(width)}" height="{_f(height)}" '
        f'viewBox="0 0 {_f(width)} {_f(height)}">',
        f'<rect x="0" y="0" width="{_f(width)}" height="{_f(height)}" fill="#303030"/>',
    ]

    def box(eid, center, length, wid, heading, fill, opacity, kind):
        corners = " ".join(f"{_f(x)},{_f(y)}" for x, y in map(to_px, box_corners(center, length, wid, heading)))
        cx, cy = to_px(center)
        out.append(
            f'<g id="{kind}-{eid}" data-x="{_f(center[0])}" data-y="{_f(center[1])}">'
            f'<polygon points="{corners}" fill="{fill}" fill-opacity="{opacity:.3f}" stroke="#000000"/>'
            f'<text x="{_f(cx)}" y="{_f(cy)}" font-size="10" text-anchor="middle">{eid}</text></g>'
        )

    cav_ids = {s.id for s in states}
    for s in sorted(states, key=lambda s: s.id):
        box(s.id, s.position, cav_extent[0], cav_extent[1], s.heading, CAV_FILL, 1.0, "cav")
    for f in sorted(fused, key=lambda f: f.object_id):
        if f.object_id in cav_ids:
            continue
        ext = f.detection.detection.extent
        box(f.object_id, f.location, ext[0], ext[1], f.heading, OTHER_FILL,
            max(0.0, min(1.0, f.p_fused)), "obj")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_bev(fused: Sequence[FusedObject], states: Sequence[CavState], path: str | Path, **kw) -> Path:
    path = Path(path)
    path.write_text(bev_svg(fused, states, **kw), encoding="utf-8")
    return path


def scaled_position(svg: str, element_id: str) -> tuple[float, float]:
    """Pixel position of a labelled element's text anchor (for parse-back checks)."""
    import xml.etree.ElementTree as ET

    ns = {"s": "http://www.w3.org/2000/svg"}
    root = ET.fromstring(svg)
    for g in root.findall("s:g", ns):
        if g.get("id") == element_id:
            t = g.find("s:text", ns)
            return float(t.get("x")), float(t.get("y"))
    raise KeyError(element_id)

