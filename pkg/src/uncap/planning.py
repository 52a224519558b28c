"""High-level planning: queries, decisions, decision uncertainty, plan PMI and
the peer-message filter, plus a deterministic rule-based planner.

A planner is anything with ``plan(query) -> PlanDecision``. Probabilities are
optional on decisions because some hosted models do not expose token
likelihoods; such decisions are kept out of information-gain bookkeeping.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

from .geometry import compass16_to_deg

ACTIONS = ("merge", "no_merge", "proceed", "stop", "yield")
INTENTIONS = ("merge", "turn", "proceed", "stop-context")
CONSERVATIVE = frozenset({"no_merge", "stop", "yield"})

# (progressive, conservative) action per intention
ACTION_PAIRS = {
    "merge": ("merge", "no_merge"),
    "turn": ("proceed", "yield"),
    "proceed": ("proceed", "stop"),
    "stop-context": ("proceed", "stop"),
}


class PlannerError(RuntimeError):
    """A planner could not produce a decision."""


class PlannerAuthError(PlannerError):
    pass


class PlannerNetworkError(PlannerError):
    pass


class PlannerFormatError(PlannerError):
    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


@dataclass(frozen=True)
class PlanQuery:
    ego_semantic_description: str
    fused_message: str = ""
    intention: str = "merge"
    images: tuple[bytes, ...] = ()

    def __post_init__(self):
        if not self.ego_semantic_description.strip():
            raise ValueError("plan query text must be non-empty")
        if self.intention not in INTENTIONS:
            raise ValueError(f"unknown intention {self.intention!r}")

    @property
    def text(self) -> str:
        if self.fused_message:
            return self.ego_semantic_description + "\n\n" + self.fused_message
        return self.ego_semantic_description

    def with_peers(self, peer_texts: Sequence[str]) -> "PlanQuery":
        """Append peer observation lines; each peer's own ego line is dropped."""
        lines = []
        for t in peer_texts:
            lines += [ln for ln in t.split("\n\n") if ln.strip() and not ln.startswith("Ego Vehicle:")]
        extra = "\n\n".join(lines)
        fused = "\n\n".join(x for x in (self.fused_message, extra) if x)
        return PlanQuery(self.ego_semantic_description, fused, self.intention, self.images)


def decision_uncertainty(probability: float) -> float:
    if not probability > 0.0:
        raise ValueError("probability must be > 0")
    if probability > 1.0:
        raise ValueError("probability must be <= 1")
    return -math.log(probability)


def plan_pmi(p_without: float, p_with: float) -> float:
    if not p_without > 0.0:
        if p_with > 0.0:
            return math.inf
        raise ValueError("PMI undefined for 0/0")
    if p_with <= 0.0:
        return -math.inf
    return math.log(p_with / p_without)


@dataclass(frozen=True)
class PlanDecision:
    action: str
    reason: str = ""
    probability: float | None = None
    u_d: float | None = None

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ValueError(f"unknown action {self.action!r}")
        if self.probability is not None:
            expected = decision_uncertainty(self.probability)
            if self.u_d is None:
                object.__setattr__(self, "u_d", expected)
            elif abs(self.u_d - expected) > 1e-9:
                raise ValueError("u_d must equal -ln(probability)")

    @property
    def conservative(self) -> bool:
        return self.action in CONSERVATIVE


class Planner(Protocol):
    def plan(self, query: PlanQuery) -> PlanDecision: ...


def likelihood_under(base: PlanDecision, action: str) -> float | None:
    """Probability the ego-only decision assigns to ``action`` (binary action space)."""
    if base.probability is None:
        return None
    if base.action == action:
        return base.probability
    return 1.0 - base.probability


# ------------------------------------------------------- description parser

_NUM = r"(-?\d+(?:\.\d+)?(?:e-?\d+)?)"
_EGO_RE = re.compile(r"Ego Vehicle: Facing (\w+), Speed: " + _NUM)
_VEH_RE = re.compile(
    r"Vehicle (\d+) \(perception confidence " + _NUM + r"/uncertainty " + _NUM + r"\): "
    r"Relative direction to Ego CAV: (\w+), Distance: " + _NUM + r" \((?:close|far)\), "
    r"Facing (\w+), Speed: (?:" + _NUM + r" )?\(?(fast|slow)\)?(.*)$"
)


@dataclass(frozen=True)
class EgoInfo:
    facing: str
    speed: float


@dataclass(frozen=True)
class VehicleInfo:
    vehicle_id: int
    confidence: float
    uncertainty: float
    direction: str
    distance: float
    facing: str
    speed: float | None
    fast: bool
    adjacent: bool

    @property
    def bearing_deg(self) -> float:
        return compass16_to_deg(self.direction)

    def closing_speed(self, ego_speed: float, fast_default: float = 10.0) -> float:
        """Rate at which the gap to the ego shrinks, from relative bearing and facing."""
        speed = self.speed if self.speed is not None else (fast_default if self.fast else 0.0)
        th = math.radians(self.bearing_deg)
        ph = math.radians(compass16_to_deg(self.facing))
        # ego frame: x forward, y to the right
        rx, ry = math.cos(th), math.sin(th)
        vx, vy = speed * math.cos(ph) - ego_speed, speed * math.sin(ph)
        return -(rx * vx + ry * vy)

    def time_to_path(self, ego_speed: float = 0.0, crosses_oncoming: bool = False,
                     fast_default: float = 10.0) -> float | None:
        """Seconds until the vehicle crosses the line ahead of the ego; None if it never does.

        A vehicle straight ahead only conflicts when the ego turns across
        oncoming traffic and the vehicle is fast; the gap then closes at the
        sum of both speeds.
        """
        speed = self.speed if self.speed is not None else (fast_default if self.fast else 0.0)
        th = math.radians(self.bearing_deg)
        ph = math.radians(compass16_to_deg(self.facing))
        x, y = self.distance * math.cos(th), self.distance * math.sin(th)
        vx, vy = speed * math.cos(ph), speed * math.sin(ph)
        if speed <= 0.0:
            return None
        if abs(y) < 1e-9:
            if not (crosses_oncoming and self.fast) or x <= 0.0 or vx >= 0.0:
                return None
            return x / (ego_speed - vx)
        if y * vy >= 0.0:
            return None
        t = -y / vy
        return t if x + vx * t > 0.0 else None


def parse_description(text: str) -> tuple[EgoInfo | None, list[VehicleInfo]]:
    """Read the semantic message format back; duplicate ids keep the least uncertain line."""
    ego = None
    vehicles: dict[int, VehicleInfo] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        m = _EGO_RE.match(line)
        if m:
            if ego is None:
                ego = EgoInfo(m.group(1), float(m.group(2)))
            continue
        m = _VEH_RE.match(line)
        if not m:
            continue
        v = VehicleInfo(
            vehicle_id=int(m.group(1)), confidence=float(m.group(2)), uncertainty=float(m.group(3)),
            direction=m.group(4), distance=float(m.group(5)), facing=m.group(6),
            speed=float(m.group(7)) if m.group(7) is not None else None,
            fast=m.group(8) == "fast", adjacent="adjacent lane" in m.group(9),
        )
        old = vehicles.get(v.vehicle_id)
        if old is None or v.uncertainty < old.uncertainty:
            vehicles[v.vehicle_id] = v
    return ego, [vehicles[k] for k in sorted(vehicles)]


# ------------------------------------------------------------ mock planner

@dataclass(frozen=True)
class MockPlannerConfig:
    close_m: float = 10.0
    base_clearance_m: float = 10.0
    clearance_slope_s: float = 0.5
    clearance_speed_mps: float = 5.0
    approach_mps: float = 0.5
    ttc_horizon_s: float = 4.0
    p_single: float = 0.95
    p_conflict: float = 0.80


def required_clearance(speed_mps: float, cfg: MockPlannerConfig = MockPlannerConfig()) -> float:
    return max(cfg.base_clearance_m,
               cfg.base_clearance_m + cfg.clearance_slope_s * (speed_mps - cfg.clearance_speed_mps))


def _is_right_lane(v: VehicleInfo) -> bool:
    return v.adjacent and 0.0 <= v.bearing_deg <= 180.0


@dataclass
class MockPlanner:
    """Deterministic stand-in for the language planner, following the merge rules."""

    config: MockPlannerConfig = field(default_factory=MockPlannerConfig)
    ego_id: int | None = None

    def plan(self, query: PlanQuery) -> PlanDecision:
        if query.intention == "merge":
            return mock_merge_planner(query, self.config, self.ego_id)
        return mock_intersection_planner(query, self.config, self.ego_id)


def _vote(go: str, hold: str, safe: list[str], unsafe: list[str], cfg: MockPlannerConfig) -> PlanDecision:
    if unsafe:
        p = cfg.p_conflict if safe else cfg.p_single
        return PlanDecision(hold, "; ".join(unsafe), p)
    return PlanDecision(go, "; ".join(safe) if safe else "path is clear", cfg.p_single)


def mock_merge_planner(query: PlanQuery, cfg: MockPlannerConfig = MockPlannerConfig(),
                       ego_id: int | None = None) -> PlanDecision:
    ego, vehicles = parse_description(query.text)
    vehicles = [v for v in vehicles if v.vehicle_id != ego_id]
    if not vehicles:
        return PlanDecision("no_merge", "No descriptions are provided about other cars, so the decision is to not merge.",
                            cfg.p_single)
    ego_speed = ego.speed if ego else 0.0
    safe, unsafe = [], []
    for v in vehicles:
        if not _is_right_lane(v):
            continue
        vid = f"vehicle {v.vehicle_id}"
        if v.distance < cfg.close_m:
            unsafe.append(f"{vid} in the right lane is only {v.distance:.2f} away")
            continue
        if v.bearing_deg >= 90.0:
            speed = v.speed if v.speed is not None else (cfg.clearance_speed_mps * 2 if v.fast else 0.0)
            need = required_clearance(speed, cfg)
            if v.distance > need:
                safe.append(f"{vid} is behind in the right lane with {v.distance:.2f} clearance")
            else:
                unsafe.append(f"{vid} is behind in the right lane and needs {need:.2f} clearance at its speed")
        elif v.closing_speed(ego_speed) > cfg.approach_mps:
            unsafe.append(f"{vid} ahead in the right lane is approaching")
        else:
            safe.append(f"{vid} ahead in the right lane is pulling away")
    if not safe and not unsafe:
        return PlanDecision("merge", "the right lane is open", cfg.p_single)
    return _vote("merge", "no_merge", safe, unsafe, cfg)


def mock_intersection_planner(query: PlanQuery, cfg: MockPlannerConfig = MockPlannerConfig(),
                              ego_id: int | None = None) -> PlanDecision:
    go, hold = ACTION_PAIRS[query.intention]
    ego, vehicles = parse_description(query.text)
    vehicles = [v for v in vehicles if v.vehicle_id != ego_id]
    ego_speed = ego.speed if ego else 0.0
    safe, unsafe = [], []
    for v in vehicles:
        b = v.bearing_deg
        if 100.0 < b < 260.0:
            continue  # behind the ego
        vid = f"vehicle {v.vehicle_id}"
        t = v.time_to_path(ego_speed, crosses_oncoming=query.intention == "turn")
        if t is not None and t < cfg.ttc_horizon_s:
            unsafe.append(f"{vid} reaches the ego path in {t:.1f} s")
        else:
            safe.append(f"{vid} is not a conflict")
    return _vote(go, hold, safe, unsafe, cfg)


# ---------------------------------------------------------- peer filtering

@dataclass
class FilterResult:
    decision: PlanDecision
    base_decision: PlanDecision
    included: tuple[int, ...]
    pmis: dict[int, float]
    flips: tuple[int, ...] = ()
    failed_peers: tuple[int, ...] = ()
    fallback: bool = False
    # (p_without, p_with) for the final decision; None when the planner gives no probabilities
    ig_pair: tuple[float, float] | None = None
    joint_below_base: bool = False


def filter_peer_messages(base_query: PlanQuery, peer_messages: Mapping[int, str], planner: Planner) -> FilterResult:
    """Keep only peers whose message raises the likelihood of the ego's plan.

    The ego-only decision is computed first; for each peer the planner sees the
    ego text plus that peer's text and the resulting plan is scored under both
    inputs. With no peer kept, the ego-only decision is returned untouched.
    """
    base = planner.plan(base_query)
    included, pmis, flips, failed = [], {}, [], []
    no_probs = base.probability is None
    for peer in sorted(peer_messages):
        try:
            with_peer = planner.plan(base_query.with_peers([peer_messages[peer]]))
        except PlannerError:
            failed.append(peer)
            continue
        if with_peer.action != base.action:
            flips.append(peer)
        if no_probs or with_peer.probability is None:
            no_probs = True
            included.append(peer)
            continue
        p_without = likelihood_under(base, with_peer.action)
        pmis[peer] = plan_pmi(p_without, with_peer.probability)
        if pmis[peer] > 0.0:
            included.append(peer)
    if not included:
        pair = (base.probability, base.probability) if base.probability is not None else None
        return FilterResult(base, base, (), pmis, tuple(flips), tuple(failed), bool(failed), pair)
    try:
        final = planner.plan(base_query.with_peers([peer_messages[p] for p in included]))
    except PlannerError:
        pair = (base.probability, base.probability) if base.probability is not None else None
        return FilterResult(base, base, (), pmis, tuple(flips), tuple(failed) + tuple(included), True, pair)
    pair = None
    below = False
    if not no_probs and final.probability is not None:
        p_without = likelihood_under(base, final.action)
        pair = (p_without, final.probability)
        below = final.probability < p_without
    return FilterResult(final, base, tuple(included), pmis, tuple(flips), tuple(failed), bool(failed), pair, below)
