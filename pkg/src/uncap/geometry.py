"""Small 2D geometry helpers shared by the world model, fusion and metrics.

World frame: East = +x, North = +y, headings in radians counter-clockwise
from +x.
"""

from __future__ import annotations

import bisect
import math
from typing import Sequence, Tuple

Vec2 = Tuple[float, float]

COMPASS_16 = (
    "N", "NNE", "NE", "ENE", "E", "ESE", "SE", "SSE",
    "S", "SSW", "SW", "WSW", "W", "WNW", "NW", "NNW",
)


def wrap_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


def angle_diff(a: float, b: float) -> float:
    return abs(wrap_angle(a - b))


def distance(a: Sequence[float], b: Sequence[float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def compass16(clockwise_deg: float) -> str:
    """16-wind token for a bearing measured clockwise from 'ahead' (N)."""
    idx = int(math.floor((clockwise_deg % 360.0) / 22.5 + 0.5)) % 16
    return COMPASS_16[idx]


def compass16_to_deg(token: str) -> float:
    return COMPASS_16.index(token) * 22.5


def relative_bearing_deg(origin: Vec2, heading: float, target: Vec2) -> float:
    """Bearing of ``target`` seen from ``origin``, clockwise from ``heading``, in [0, 360)."""
    alpha = math.atan2(target[1] - origin[1], target[0] - origin[0])
    return math.degrees(heading - alpha) % 360.0


def absolute_bearing_deg(heading: float) -> float:
    """Map heading (CCW from East) to a compass bearing (CW from North)."""
    return (90.0 - math.degrees(heading)) % 360.0


def aabb_of_box(center: Vec2, length: float, width: float, heading: float) -> Tuple[float, float, float, float]:
    """Axis-aligned bounds (xmin, ymin, xmax, ymax) of an oriented rectangle."""
    c, s = abs(math.cos(heading)), abs(math.sin(heading))
    hx = 0.5 * (length * c + width * s)
    hy = 0.5 * (length * s + width * c)
    return center[0] - hx, center[1] - hy, center[0] + hx, center[1] + hy


def segment_hits_aabb(p0: Vec2, p1: Vec2, box: Tuple[float, float, float, float]) -> bool:
    """Liang-Barsky clip test: does segment p0-p1 touch the box?"""
    xmin, ymin, xmax, ymax = box
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    t0, t1 = 0.0, 1.0
    for p, q in ((-dx, p0[0] - xmin), (dx, xmax - p0[0]), (-dy, p0[1] - ymin), (dy, ymax - p0[1])):
        if p == 0.0:
            if q < 0.0:
                return False
            continue
        t = q / p
        if p < 0.0:
            if t > t1:
                return False
            t0 = max(t0, t)
        else:
            if t < t0:
                return False
            t1 = min(t1, t)
    return t0 <= t1


def box_corners(center: Vec2, length: float, width: float, heading: float) -> list[Vec2]:
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = 0.5 * length, 0.5 * width
    out = []
    for a, b in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)):
        out.append((center[0] + a * c - b * s, center[1] + a * s + b * c))
    return out


def boxes_overlap(
    c1: Vec2, l1: float, w1: float, h1: float,
    c2: Vec2, l2: float, w2: float, h2: float,
) -> bool:
    """Separating-axis test for two oriented rectangles."""
    # cheap reject on bounding circles
    r1 = 0.5 * math.hypot(l1, w1)
    r2 = 0.5 * math.hypot(l2, w2)
    if distance(c1, c2) > r1 + r2:
        return False
    k1 = box_corners(c1, l1, w1, h1)
    k2 = box_corners(c2, l2, w2, h2)
    for h in (h1, h2):
        for ax in ((math.cos(h), math.sin(h)), (-math.sin(h), math.cos(h))):
            p1 = [x * ax[0] + y * ax[1] for x, y in k1]
            p2 = [x * ax[0] + y * ax[1] for x, y in k2]
            if max(p1) < min(p2) or max(p2) < min(p1):
                return False
    return True


def _point_segment(p: Vec2, a: Vec2, b: Vec2) -> float:
    vx, vy = b[0] - a[0], b[1] - a[1]
    seg2 = vx * vx + vy * vy
    t = 0.0 if seg2 == 0.0 else max(0.0, min(1.0, ((p[0] - a[0]) * vx + (p[1] - a[1]) * vy) / seg2))
    return math.hypot(p[0] - a[0] - t * vx, p[1] - a[1] - t * vy)


def box_clearance(
    c1: Vec2, l1: float, w1: float, h1: float,
    c2: Vec2, l2: float, w2: float, h2: float,
) -> float:
    """Gap between two oriented rectangles; negative penetration depth when they overlap."""
    k1 = box_corners(c1, l1, w1, h1)
    k2 = box_corners(c2, l2, w2, h2)
    depth = math.inf
    for h in (h1, h2):
        for ax in ((math.cos(h), math.sin(h)), (-math.sin(h), math.cos(h))):
            p1 = [x * ax[0] + y * ax[1] for x, y in k1]
            p2 = [x * ax[0] + y * ax[1] for x, y in k2]
            overlap = min(max(p1) - min(p2), max(p2) - min(p1))
            if overlap < 0.0:
                depth = None
                break
            depth = min(depth, overlap)
        if depth is None:
            break
    if depth is not None:
        return -depth
    best = math.inf
    for pts, other in ((k1, k2), (k2, k1)):
        for p in pts:
            for i in range(4):
                best = min(best, _point_segment(p, other[i], other[(i + 1) % 4]))
    return best


def support_half_extent(length: float, width: float, heading: float, u: Vec2) -> float:
    """Half-extent of an oriented rectangle along unit direction ``u``."""
    c, s = math.cos(heading), math.sin(heading)
    along = abs(u[0] * c + u[1] * s)
    across = abs(-u[0] * s + u[1] * c)
    return 0.5 * length * along + 0.5 * width * across


class Polyline:
    """Piecewise-linear path with arc-length parameterisation."""

    def __init__(self, points: Sequence[Sequence[float]]):
        if len(points) < 1:
            raise ValueError("polyline needs at least one point")
        self.points: list[Vec2] = [(float(p[0]), float(p[1])) for p in points]
        self.cum = [0.0]
        for a, b in zip(self.points, self.points[1:]):
            self.cum.append(self.cum[-1] + distance(a, b))

    @property
    def length(self) -> float:
        return self.cum[-1]

    def project(self, p: Sequence[float], s_min: float = -math.inf) -> Tuple[float, float]:
        """Return (arc-length, lateral distance) of the closest point at or beyond ``s_min``."""
        pts = self.points
        if len(pts) == 1:
            return 0.0, distance(p, pts[0])
        s_min = min(s_min, self.length)
        best_s, best_d = 0.0, math.inf
        for i in range(len(pts) - 1):
            if self.cum[i + 1] < s_min:
                continue
            ax, ay = pts[i]
            bx, by = pts[i + 1]
            vx, vy = bx - ax, by - ay
            seg2 = vx * vx + vy * vy
            t = 0.0 if seg2 == 0.0 else ((p[0] - ax) * vx + (p[1] - ay) * vy) / seg2
            t = min(1.0, max(0.0, t))
            qx, qy = ax + t * vx, ay + t * vy
            d = math.hypot(p[0] - qx, p[1] - qy)
            if d < best_d:
                best_d = d
                best_s = self.cum[i] + t * (self.cum[i + 1] - self.cum[i])
        return best_s, best_d

    def offset(self, p: Sequence[float], s_min: float = -math.inf) -> float:
        """Lateral distance to the path, treating the last segment as continuing forever."""
        s, d = self.project(p, s_min)
        pts = self.points
        if len(pts) < 2 or s < self.length:
            return d
        (ax, ay), (bx, by) = pts[-2], pts[-1]
        seg = math.hypot(bx - ax, by - ay)
        if seg == 0.0:
            return d
        return abs((p[0] - ax) * (by - ay) - (p[1] - ay) * (bx - ax)) / seg

    def along(self, p: Sequence[float], s_min: float = -math.inf) -> float:
        """Arc-length of ``p``, continuing past the end along the last segment."""
        s, _ = self.project(p, s_min)
        pts = self.points
        if len(pts) < 2 or s < self.length:
            return s
        (ax, ay), (bx, by) = pts[-2], pts[-1]
        seg = math.hypot(bx - ax, by - ay)
        if seg == 0.0:
            return s
        return self.length + max(0.0, ((p[0] - bx) * (bx - ax) + (p[1] - by) * (by - ay)) / seg)

    def point_at(self, s: float) -> Vec2:
        """Point at arc-length ``s``; extrapolates along the end segments."""
        pts = self.points
        if len(pts) == 1:
            return pts[0]
        if s <= 0.0:
            i = 0
        elif s >= self.length:
            i = len(pts) - 2
        else:
            i = min(bisect.bisect_right(self.cum, s) - 1, len(pts) - 2)
        seg = self.cum[i + 1] - self.cum[i]
        t = 0.0 if seg == 0.0 else (s - self.cum[i]) / seg
        ax, ay = pts[i]
        bx, by = pts[i + 1]
        return ax + t * (bx - ax), ay + t * (by - ay)
