"""World model: scenario files, ground truth, point-mass kinematics and a
synthetic class-confidence detector.

Everything here is immutable once loaded; the engine creates new states each
tick rather than mutating them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .geometry import (
    Polyline,
    Vec2,
    aabb_of_box,
    angle_diff,
    distance,
    segment_hits_aabb,
    wrap_angle,
)

DEFAULT_CLASSES = ("car", "truck", "bus", "cyclist")
HEADING_TOL = 1e-6
SPEED_EPS = 1e-6


class ScenarioError(ValueError):
    """Malformed or inconsistent scenario input."""


@dataclass(frozen=True)
class KinematicParams:
    a_max: float = 3.0
    b_max: float = 8.0
    v_max: float = 40.0
    k_steer: float = 0.5


@dataclass(frozen=True)
class Control:
    throttle: float = 0.0
    brake: float = 0.0
    steer: float = 0.0

    def clamped(self) -> "Control":
        return Control(
            min(1.0, max(0.0, self.throttle)),
            min(1.0, max(0.0, self.brake)),
            min(1.0, max(-1.0, self.steer)),
        )


@dataclass(frozen=True)
class CavState:
    id: int
    position: Vec2
    velocity: Vec2
    heading: float
    goal_position: Vec2
    route: tuple[Vec2, ...]

    def __post_init__(self):
        if not self.route:
            raise ScenarioError(f"cav {self.id}: route must be non-empty")
        if tuple(self.goal_position) != tuple(self.route[-1]):
            raise ScenarioError(f"cav {self.id}: goal must equal the final route waypoint")
        if self.speed > SPEED_EPS:
            if angle_diff(math.atan2(self.velocity[1], self.velocity[0]), self.heading) > HEADING_TOL:
                raise ScenarioError(f"cav {self.id}: heading inconsistent with velocity")

    @property
    def speed(self) -> float:
        return math.hypot(self.velocity[0], self.velocity[1])


@dataclass(frozen=True)
class ObjectTruth:
    object_id: int
    class_label: int
    location: Vec2
    extent: tuple[float, float, float]
    speed: float
    heading: float

    @property
    def footprint(self) -> tuple[float, float, float, float]:
        return aabb_of_box(self.location, self.extent[0], self.extent[1], self.heading)


@dataclass(frozen=True)
class Keyframe:
    tick: int
    location: Vec2
    speed: float
    heading: float


@dataclass(frozen=True)
class ObjectTrack:
    """Scripted (non-CAV) road user: keyframes, linearly interpolated, held at the ends."""

    object_id: int
    class_label: int
    extent: tuple[float, float, float]
    keyframes: tuple[Keyframe, ...]

    def at(self, tick: int) -> ObjectTruth:
        ks = self.keyframes
        if tick <= ks[0].tick or len(ks) == 1:
            k = ks[0]
            return ObjectTruth(self.object_id, self.class_label, k.location, self.extent, k.speed, k.heading)
        if tick >= ks[-1].tick:
            k = ks[-1]
            return ObjectTruth(self.object_id, self.class_label, k.location, self.extent, k.speed, k.heading)
        for a, b in zip(ks, ks[1:]):
            if a.tick <= tick <= b.tick:
                t = (tick - a.tick) / (b.tick - a.tick)
                loc = (a.location[0] + t * (b.location[0] - a.location[0]),
                       a.location[1] + t * (b.location[1] - a.location[1]))
                heading = wrap_angle(a.heading + t * wrap_angle(b.heading - a.heading))
                speed = a.speed + t * (b.speed - a.speed)
                return ObjectTruth(self.object_id, self.class_label, loc, self.extent, speed, heading)
        raise AssertionError("unreachable")


@dataclass(frozen=True)
class Detection:
    observer_id: int
    object_id: int
    location: Vec2
    extent: tuple[float, float, float]
    speed: float
    confidence_vector: tuple[float, ...]
    heading: float = 0.0

    def __post_init__(self):
        cv = self.confidence_vector
        if len(cv) < 2:
            raise ValueError("confidence vector needs at least two classes")
        if any(c < 0.0 or c > 1.0 for c in cv):
            raise ValueError("confidence entries must lie in [0, 1]")
        if abs(math.fsum(cv) - 1.0) > 1e-9:
            raise ValueError("confidence vector must sum to 1")


@dataclass(frozen=True)
class SensorConfig:
    range_m: float = 70.0
    fov_rad: float = 2.0 * math.pi / 3.0
    noise_temp: float = 0.3
    # extra temperature per metre of range: far objects are seen less clearly
    temp_per_m: float = 0.0
    noise_scale: float = 1.0

    def temperature_at(self, dist: float) -> float:
        return self.noise_temp + self.temp_per_m * dist


@dataclass(frozen=True)
class Lane:
    id: str
    polyline: tuple[Vec2, ...]
    width: float = 3.5


@dataclass(frozen=True)
class DecisionPoint:
    position: Vec2
    intention: str
    hold_position: Vec2 | None = None


@dataclass(frozen=True)
class CavProfile:
    """Driving and sensing parameters that sit next to a CAV's kinematic state."""

    extent: tuple[float, float, float] = (4.5, 2.0, 1.5)
    cruise_speed: float = 10.0
    stop_at_goal: bool = True
    sensor: SensorConfig = field(default_factory=SensorConfig)
    decision_points: tuple[DecisionPoint, ...] = ()


@dataclass(frozen=True)
class Scenario:
    name: str
    cavs: tuple[CavState, ...]
    objects: tuple[ObjectTrack, ...]
    tick_rate: float
    duration_ticks: int
    lanes: tuple[Lane, ...] = ()
    detections: Mapping[int, Mapping[int, tuple[Detection, ...]]] | None = None
    profiles: Mapping[int, CavProfile] = field(default_factory=dict)
    class_names: tuple[str, ...] = DEFAULT_CLASSES
    ego_ids: tuple[int, ...] = ()
    conflict_pair: tuple[int, int] | None = None

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def dt(self) -> float:
        return 1.0 / self.tick_rate

    @property
    def entity_ids(self) -> list[int]:
        return [c.id for c in self.cavs] + [o.object_id for o in self.objects]

    def profile(self, cav_id: int) -> CavProfile:
        return self.profiles.get(cav_id, CavProfile())

    def cav(self, cav_id: int) -> CavState:
        for c in self.cavs:
            if c.id == cav_id:
                return c
        raise KeyError(cav_id)

    def planning_egos(self) -> tuple[int, ...]:
        if self.ego_ids:
            return self.ego_ids
        return tuple(c.id for c in self.cavs if self.profile(c.id).decision_points)

    def extent_of(self, entity_id: int) -> tuple[float, float, float]:
        for o in self.objects:
            if o.object_id == entity_id:
                return o.extent
        return self.profile(entity_id).extent

    def supplied_detections(self, cav_id: int, tick: int) -> tuple[Detection, ...] | None:
        if not self.detections:
            return None
        per_cav = self.detections.get(cav_id)
        if per_cav is None:
            return None
        return per_cav.get(tick)


# ----------------------------------------------------------------- loading

def _vec(value: Any, where: str, n: int = 2) -> tuple[float, ...]:
    if not isinstance(value, (list, tuple)) or len(value) != n:
        raise ScenarioError(f"{where}: expected {n} numbers, got {value!r}")
    try:
        return tuple(float(v) for v in value)
    except (TypeError, ValueError):
        raise ScenarioError(f"{where}: expected {n} numbers, got {value!r}") from None


def _num(doc: Mapping[str, Any], key: str, where: str, default: Any = None) -> float:
    if key not in doc:
        if default is None:
            raise ScenarioError(f"{where}.{key}: missing")
        return default
    v = doc[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioError(f"{where}.{key}: expected a number, got {v!r}")
    return float(v)


def _sensor(doc: Mapping[str, Any] | None, base: SensorConfig, where: str) -> SensorConfig:
    if not doc:
        return base
    known = {"range_m", "fov_rad", "noise_temp", "temp_per_m", "noise_scale"}
    unknown = set(doc) - known
    if unknown:
        raise ScenarioError(f"{where}: unknown sensor fields {sorted(unknown)}")
    cfg = replace(base, **{k: float(v) for k, v in doc.items()})
    if cfg.noise_temp <= 0:
        raise ScenarioError(f"{where}.noise_temp: must be > 0")
    return cfg


def _extent(value: Any, where: str) -> tuple[float, float, float]:
    ext = _vec(value, where, 3)
    if any(e <= 0 for e in ext):
        raise ScenarioError(f"{where}: extent components must be > 0")
    return ext  # type: ignore[return-value]


def scenario_from_dict(doc: Mapping[str, Any], name: str = "scenario") -> Scenario:
    if not isinstance(doc, Mapping):
        raise ScenarioError("scenario document must be a JSON object")
    name = str(doc.get("name", name))
    tick_rate = _num(doc, "tick_rate_hz", "scenario")
    if tick_rate <= 0:
        raise ScenarioError("scenario.tick_rate_hz: must be > 0")
    duration = int(_num(doc, "duration_ticks", "scenario"))
    if duration <= 0:
        raise ScenarioError("scenario.duration_ticks: must be > 0")
    class_names = tuple(doc.get("classes", DEFAULT_CLASSES))
    if len(class_names) < 2:
        raise ScenarioError("scenario.classes: need at least two classes")
    base_sensor = _sensor(doc.get("sensor"), SensorConfig(), "scenario.sensor")

    lanes = []
    for i, ln in enumerate(doc.get("lanes", [])):
        where = f"lanes[{i}]"
        poly = tuple(_vec(p, f"{where}.polyline[{j}]") for j, p in enumerate(ln.get("polyline", [])))
        if len(poly) < 2:
            raise ScenarioError(f"{where}.polyline: need at least two points")
        lanes.append(Lane(str(ln.get("id", i)), poly, _num(ln, "width", where, 3.5)))

    cav_docs = doc.get("cavs", [])
    if not cav_docs:
        raise ScenarioError("scenario must contain ≥ 1 CAV")
    cavs, profiles = [], {}
    for i, c in enumerate(cav_docs):
        where = f"cavs[{i}]"
        if "id" not in c:
            raise ScenarioError(f"{where}.id: missing")
        cid = int(c["id"])
        if cid in profiles:
            raise ScenarioError(f"{where}.id: duplicate cav id {cid}")
        pos = _vec(c.get("position"), f"{where}.position")
        if "velocity" not in c and "speed" in c and "heading" in c:
            v, h = _num(c, "speed", where), _num(c, "heading", where)
            vel = (v * math.cos(h), v * math.sin(h))
        else:
            vel = _vec(c.get("velocity", [0.0, 0.0]), f"{where}.velocity")
        speed = math.hypot(*vel)
        if "heading" in c:
            heading = wrap_angle(_num(c, "heading", where))
            if "velocity" not in c and speed > SPEED_EPS:
                heading = math.atan2(vel[1], vel[0])
        elif speed > SPEED_EPS:
            heading = math.atan2(vel[1], vel[0])
        else:
            raise ScenarioError(f"{where}.heading: required for a stationary CAV")
        route = tuple(_vec(p, f"{where}.route[{j}]") for j, p in enumerate(c.get("route", [])))
        if not route:
            raise ScenarioError(f"{where}.route: must be non-empty")
        goal = _vec(c["goal"], f"{where}.goal") if "goal" in c else route[-1]
        if goal != route[-1]:
            raise ScenarioError(f"{where}.goal: must equal the final route waypoint")
        try:
            cavs.append(CavState(cid, pos, vel, heading, goal, route))
        except ScenarioError as e:
            raise ScenarioError(f"{where}: {e}") from None
        dps = []
        for j, dp in enumerate(c.get("decision_points", [])):
            dwhere = f"{where}.decision_points[{j}]"
            intention = dp.get("intention", "merge")
            if intention not in ("merge", "turn", "proceed", "stop-context"):
                raise ScenarioError(f"{dwhere}.intention: unknown intention {intention!r}")
            hold = _vec(dp["hold_position"], f"{dwhere}.hold_position") if "hold_position" in dp else None
            dps.append(DecisionPoint(_vec(dp.get("position"), f"{dwhere}.position"), intention, hold))
        profiles[cid] = CavProfile(
            extent=_extent(c.get("extent", [4.5, 2.0, 1.5]), f"{where}.extent"),
            cruise_speed=_num(c, "cruise_speed", where, speed),
            stop_at_goal=bool(c.get("stop_at_goal", True)),
            sensor=_sensor(c.get("sensor"), base_sensor, f"{where}.sensor"),
            decision_points=tuple(dps),
        )

    objects, seen = [], set(profiles)
    for i, o in enumerate(doc.get("objects", [])):
        where = f"objects[{i}]"
        if "id" not in o:
            raise ScenarioError(f"{where}.id: missing")
        oid = int(o["id"])
        if oid in seen:
            raise ScenarioError(f"{where}.id: duplicate entity id {oid}")
        seen.add(oid)
        cls = int(o.get("class", 0))
        if not 0 <= cls < len(class_names):
            raise ScenarioError(f"{where}.class: {cls} outside [0, {len(class_names)})")
        kfs = []
        for j, k in enumerate(o.get("per_tick", [])):
            kw = f"{where}.per_tick[{j}]"
            kfs.append(Keyframe(int(_num(k, "tick", kw)), _vec(k.get("location"), f"{kw}.location"),
                                _num(k, "speed", kw, 0.0), wrap_angle(_num(k, "heading", kw, 0.0))))
        if not kfs:
            raise ScenarioError(f"{where}.per_tick: need at least one keyframe")
        kfs.sort(key=lambda k: k.tick)
        objects.append(ObjectTrack(oid, cls, _extent(o.get("extent", [4.5, 2.0, 1.5]), f"{where}.extent"), tuple(kfs)))

    detections = None
    if doc.get("detections"):
        known_objects = {o.object_id for o in objects}
        detections = {}
        for cav_key, per_tick in doc["detections"].items():
            cav_id = int(cav_key)
            if cav_id not in profiles:
                raise ScenarioError(f"detections.{cav_key}: unknown cav id {cav_id}")
            ticks = {}
            for tick_key, dets in per_tick.items():
                parsed = []
                for j, d in enumerate(dets):
                    where = f"detections.{cav_key}.{tick_key}[{j}]"
                    obj_id = int(d.get("object_id", -1))
                    if obj_id not in known_objects:
                        raise ScenarioError(f"{where}.object_id: unknown object id {obj_id}")
                    conf = tuple(float(x) for x in d.get("confidence_vector", []))
                    if len(conf) != len(class_names):
                        raise ScenarioError(f"{where}.confidence_vector: expected {len(class_names)} entries")
                    try:
                        parsed.append(Detection(
                            cav_id, obj_id, _vec(d.get("location"), f"{where}.location"),
                            _extent(d.get("extent", [4.5, 2.0, 1.5]), f"{where}.extent"),
                            float(d.get("speed", 0.0)), conf, float(d.get("heading", 0.0))))
                    except ValueError as e:
                        if isinstance(e, ScenarioError):
                            raise
                        raise ScenarioError(f"{where}.confidence_vector: {e}") from None
                ticks[int(tick_key)] = tuple(parsed)
            detections[cav_id] = ticks

    ego_ids = tuple(int(e) for e in doc.get("ego_ids", []))
    for e in ego_ids:
        if e not in profiles:
            raise ScenarioError(f"ego_ids: unknown cav id {e}")
    conflict = doc.get("conflict_pair")
    if conflict is not None:
        conflict = (int(conflict[0]), int(conflict[1]))
        for e in conflict:
            if e not in seen:
                raise ScenarioError(f"conflict_pair: unknown entity id {e}")

    return Scenario(
        name=name, cavs=tuple(cavs), objects=tuple(objects), tick_rate=tick_rate,
        duration_ticks=duration, lanes=tuple(lanes), detections=detections,
        profiles=profiles, class_names=class_names, ego_ids=ego_ids, conflict_pair=conflict,
    )


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    if not path.exists():
        bundled = bundled_scenario_path(path.name)
        if bundled is None:
            raise FileNotFoundError(f"scenario file not found: {path}")
        path = bundled
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    return scenario_from_dict(doc, name=path.stem)


def _bundled_dir():
    return resources.files("uncap").joinpath("data", "scenarios")


def bundled_scenario_path(name: str) -> Path | None:
    if not name.endswith(".json"):
        name += ".json"
    p = Path(str(_bundled_dir().joinpath(name)))
    return p if p.is_file() else None


def bundled_scenarios() -> list[Path]:
    return sorted(Path(str(_bundled_dir())).glob("*.json"))


# -------------------------------------------------------------- kinematics

def step_kinematics(state: CavState, control: Control, dt: float,
                    params: KinematicParams = KinematicParams()) -> CavState:
    """Point-mass update: speed first, then heading, then position along the new heading."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    u = control.clamped()
    speed = state.speed + (params.a_max * u.throttle - params.b_max * u.brake) * dt
    speed = min(params.v_max, max(0.0, speed))
    heading = state.heading
    if u.steer != 0.0 and speed > 0.0:
        heading = wrap_angle(heading + u.steer * params.k_steer * dt * speed)
    if speed == 0.0:
        return replace(state, velocity=(0.0, 0.0), heading=heading)
    c, s = math.cos(heading), math.sin(heading)
    pos = (state.position[0] + speed * dt * c, state.position[1] + speed * dt * s)
    return replace(state, position=pos, velocity=(speed * c, speed * s), heading=heading)


def as_truth(state: CavState, profile: CavProfile, class_label: int = 0) -> ObjectTruth:
    return ObjectTruth(state.id, class_label, state.position, profile.extent, state.speed, state.heading)


# ---------------------------------------------------------------- detector

def confidence_vector(true_class: int, num_classes: int, temperature: float,
                      rng: np.random.Generator, noise_scale: float = 1.0) -> tuple[float, ...]:
    """softmax(one_hot / T + N(0, noise_scale^2)) for one object."""
    logits = noise_scale * rng.standard_normal(num_classes)
    logits[true_class] += 1.0 / temperature
    logits -= logits.max()
    p = np.exp(logits)
    p /= p.sum()
    return tuple(float(x) for x in p)


def is_visible(observer: ObjectTruth | CavState, target: ObjectTruth,
               others: Iterable[ObjectTruth], sensor: SensorConfig) -> bool:
    pos = observer.position if isinstance(observer, CavState) else observer.location
    heading = observer.heading
    d = distance(pos, target.location)
    if d > sensor.range_m:
        return False
    if sensor.fov_rad < 2.0 * math.pi:
        bearing = math.atan2(target.location[1] - pos[1], target.location[0] - pos[0])
        if angle_diff(bearing, heading) > 0.5 * sensor.fov_rad:
            return False
    for o in others:
        if segment_hits_aabb(pos, target.location, o.footprint):
            return False
    return True


def synthesize_detections(truth: Sequence[ObjectTruth], observer: CavState, sensor: SensorConfig,
                          rng_seed: int | Sequence[int], num_classes: int = len(DEFAULT_CLASSES)) -> list[Detection]:
    """Detections an observer would report for the given ground truth.

    Objects are visited in ascending id order and each visible one consumes
    ``num_classes`` normals from a generator seeded with ``rng_seed``.
    """
    if sensor.noise_temp <= 0:
        raise ValueError("noise_temp must be > 0")
    rng = np.random.default_rng(rng_seed)
    pool = [t for t in truth if t.object_id != observer.id]
    pool.sort(key=lambda t: t.object_id)
    out = []
    for target in pool:
        others = [o for o in pool if o.object_id != target.object_id]
        if not is_visible(observer, target, others, sensor):
            continue
        temp = sensor.temperature_at(distance(observer.position, target.location))
        conf = confidence_vector(target.class_label, num_classes, temp, rng, sensor.noise_scale)
        out.append(Detection(observer.id, target.object_id, target.location, target.extent,
                             target.speed, conf, target.heading))
    return out


def synthetic_calibration_set(n: int, sensor: SensorConfig, num_classes: int = len(DEFAULT_CLASSES),
                              seed: int = 7) -> list[tuple[tuple[float, ...], int]]:
    """(confidence_vector, true_class) pairs drawn from the detector model.

    Distances are uniform over the sensor range so range-dependent noise is
    represented in proportion.
    """
    if n <= 0:
        raise ValueError("calibration set size must be > 0")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        cls = int(rng.integers(num_classes))
        temp = sensor.temperature_at(float(rng.uniform(0.0, sensor.range_m)))
        out.append((confidence_vector(cls, num_classes, temp, rng, sensor.noise_scale), cls))
    return out
