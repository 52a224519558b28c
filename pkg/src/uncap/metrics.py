"""Episode scoring: driving score, route completion, infraction penalty,
bandwidth, information gain and the near-miss distance margin."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .geometry import Polyline, box_clearance

INFRACTION_KINDS = ("collision_vehicle", "collision_static", "red_light", "stop_sign", "lane_invasion")
TERMINAL_KINDS = frozenset({"collision_vehicle", "collision_static"})


def default_penalties() -> dict[str, float]:
    text = resources.files("uncap").joinpath("data", "penalties.json").read_text(encoding="utf-8")
    return load_penalty_table(json.loads(text))


def load_penalty_table(doc: Mapping[str, float]) -> dict[str, float]:
    table = {}
    for kind in INFRACTION_KINDS:
        if kind not in doc:
            raise ValueError(f"penalty table missing {kind!r}")
        v = float(doc[kind])
        if not 0.0 < v <= 1.0:
            raise ValueError(f"penalty {kind!r} must lie in (0, 1]")
        table[kind] = v
    return table


@dataclass(frozen=True)
class InfractionEvent:
    tick: int
    kind: str
    penalty_coefficient: float
    actor: int | None = None
    other: int | None = None

    def __post_init__(self):
        if self.kind not in INFRACTION_KINDS:
            raise ValueError(f"unknown infraction kind {self.kind!r}")
        if not 0.0 < self.penalty_coefficient <= 1.0:
            raise ValueError("penalty coefficient must lie in (0, 1]")


def make_infraction(tick: int, kind: str, table: Mapping[str, float] | None = None, **kw) -> InfractionEvent:
    table = table if table is not None else default_penalties()
    return InfractionEvent(tick, kind, table[kind], **kw)


@dataclass(frozen=True)
class EpisodeMetrics:
    ds: float
    rc: float
    ip: float
    tb_kb: float | None
    ig_perception: float | None
    ig_decision: float | None
    min_distance_margin_m: float | None

    def as_dict(self) -> dict:
        return asdict(self)


def route_completion(trajectory: Sequence[Sequence[float]], route: Sequence[Sequence[float]],
                     failure_index: int | None = None) -> float:
    """Furthest route arc-length reached (up to the first terminal failure) over route length."""
    line = Polyline(route)
    if line.length <= 0.0:
        raise ValueError("route must have positive length")
    pts = trajectory if failure_index is None else trajectory[: failure_index + 1]
    best, s_min = 0.0, 0.0
    for p in pts:
        # monotone projection so a route that doubles back is not short-circuited
        s, _ = line.project(p, s_min)
        best = max(best, s)
        s_min = max(0.0, best - 5.0)
    return min(1.0, max(0.0, best / line.length))


def infraction_penalty(events: Iterable[InfractionEvent]) -> float:
    coeffs = sorted(e.penalty_coefficient for e in events)
    ip = 1.0
    for c in coeffs:
        ip *= c
    return max(0.0, ip)


def driving_score(rc: float, ip: float) -> float:
    if not (0.0 <= rc <= 1.0 and 0.0 <= ip <= 1.0):
        raise ValueError("rc and ip must lie in [0, 1]")
    return rc * ip


def information_gain(pairs: Sequence[tuple[float, float]]) -> float | None:
    """Mean natural-log ratio of p_with to p_without; None when there is nothing to average."""
    if not pairs:
        return None
    total = 0.0
    for p_without, p_with in pairs:
        if not p_without > 0.0:
            raise ValueError("p_without must be > 0")
        total += math.log(p_with / p_without)
    return total / len(pairs)


def pair_margin(c1, ext1, h1, c2, ext2, h2) -> float:
    """Clearance between two vehicle footprints; <= 0 means contact."""
    return box_clearance(c1, ext1[0], ext1[1], h1, c2, ext2[0], ext2[1], h2)


def min_distance_margin(traj_a: Sequence[tuple], traj_b: Sequence[tuple],
                        extent_a: Sequence[float], extent_b: Sequence[float]) -> float:
    """Minimum clearance over time-aligned samples; each sample is ((x, y), heading)."""
    if len(traj_a) != len(traj_b):
        raise ValueError("trajectories must be time-aligned")
    if not traj_a:
        raise ValueError("empty trajectories")
    return min(pair_margin(a[0], extent_a, a[1], b[0], extent_b, b[1]) for a, b in zip(traj_a, traj_b))


def jerk_rms(speeds: Sequence[float], dt: float) -> float:
    if len(speeds) < 3:
        return 0.0
    acc = [(b - a) / dt for a, b in zip(speeds, speeds[1:])]
    jerk = [(b - a) / dt for a, b in zip(acc, acc[1:])]
    return math.sqrt(sum(j * j for j in jerk) / len(jerk))


def penalties_path() -> Path:
    return Path(str(resources.files("uncap").joinpath("data", "penalties.json")))
