"""Deterministic tick loop and replayable episode logs.

Stage order inside one tick (fixed, so runs are reproducible):

1. ground truth for the tick, detections per CAV, calibration;
2. deliveries due this tick, in (delivered tick, sender id) order;
3. BARE broadcast (every comm mode), one envelope per link;
4. partner selection and semantic messages to each receiver;
5. planner queries for egos at decision points, decisions whose latency
   elapsed are applied;
6. controls, kinematics, infraction checks.

Metrics are always computed from the logged records, so a persisted log
replays to the same numbers.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .calibration import (
    CalibratedDetection,
    NonconformityModel,
    calibrate_detection,
    fit_calibrator,
    load_calibrator,
)
from .fusion import (
    DescribeParams,
    FusedObject,
    SemanticMessage,
    format_semantic_message,
    parse_semantic_message,
    select_for_fusion,
    solo,
)
from .geometry import Polyline, boxes_overlap, wrap_angle
from .metrics import (
    TERMINAL_KINDS,
    EpisodeMetrics,
    InfractionEvent,
    default_penalties,
    driving_score,
    infraction_penalty,
    information_gain,
    min_distance_margin,
    route_completion,
)
from .planning import (
    MockPlanner,
    PlanDecision,
    Planner,
    PlannerError,
    PlanQuery,
    filter_peer_messages,
    likelihood_under,
)
from .protocol import (
    BandwidthLedger,
    BarePacket,
    ChannelParams,
    MessageEnvelope,
    SpareConfig,
    Tier,
    make_bare_packet,
    make_envelope,
    record,
    spare_select,
    transmit,
)
from .scenario import (
    CavState,
    Control,
    Detection,
    KinematicParams,
    ObjectTruth,
    Scenario,
    SensorConfig,
    as_truth,
    step_kinematics,
    synthesize_detections,
    synthetic_calibration_set,
)

SCHEMA = "uncap.episode/1"
MODES = ("no_comm", "broadcast_all", "fuse_no_spare", "uncap", "uncap_images")
SPARE_MODES = frozenset({"uncap", "uncap_images"})
FUSION_MODES = frozenset({"fuse_no_spare", "uncap", "uncap_images"})


class LogError(ValueError):
    """Episode log is truncated, malformed or belongs to another scenario."""


@dataclass(frozen=True)
class SimConfig:
    mode: str = "uncap"
    spare: SpareConfig = field(default_factory=SpareConfig)
    channel: ChannelParams = field(default_factory=ChannelParams)
    planner: str = "mock"
    seed: int = 0
    calibrator_path: str | None = None
    planner_latency_s: float = 1.33
    requery_s: float = 1.0
    hold_window_ticks: int = 10
    image_bytes: int = 250_000
    lane_invasion_m: float = 3.0
    fusion_gate_m: float = 2.0
    match_by_id: bool = True
    stop_decel: float = 4.0
    kinematics: KinematicParams = field(default_factory=KinematicParams)
    penalties: Mapping[str, float] | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; valid modes: {', '.join(MODES)}")
        if self.planner not in ("mock", "external"):
            raise ValueError("planner must be 'mock' or 'external'")
        if self.planner_latency_s < 0 or self.requery_s <= 0:
            raise ValueError("latencies must be >= 0 and requery interval > 0")
        if self.hold_window_ticks < 1:
            raise ValueError("hold_window_ticks must be >= 1")

    @property
    def comm(self) -> bool:
        return self.mode != "no_comm"

    def describe(self) -> dict:
        d = asdict(self)
        d["penalties"] = dict(self.penalties) if self.penalties is not None else None
        return d


# ------------------------------------------------------------------ helpers

def sig6(x: float) -> float | str:
    """Round to 6 significant digits; infinities become strings so the log stays valid JSON."""
    if isinstance(x, float) and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return float(f"{x:.6g}")




@lru_cache(maxsize=32)
def default_calibrator(sensor: SensorConfig, num_classes: int, n: int = 1000, seed: int = 7) -> NonconformityModel:
    return fit_calibrator(synthetic_calibration_set(n, sensor, num_classes, seed))


@dataclass(frozen=True)
class _Pose:
    """Receiver pose as a sender knows it from the BARE packet."""

    id: int
    position: tuple[float, float]
    heading: float
    velocity: tuple[float, float]

    @property
    def speed(self) -> float:
        return math.hypot(*self.velocity)


def scenario_fingerprint(scenario: Scenario) -> str:
    doc = {
        "name": scenario.name,
        "tick_rate": scenario.tick_rate,
        "duration": scenario.duration_ticks,
        "cavs": [[c.id, list(c.position), list(c.velocity), c.heading, [list(p) for p in c.route]]
                 for c in scenario.cavs],
        "objects": [[o.object_id, [[k.tick, list(k.location)] for k in o.keyframes]] for o in scenario.objects],
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class _Driver:
    cav_id: int
    route: Polyline
    cruise: float
    stop_at_goal: bool
    length: float
    dp_s: list[float]
    hold_s: list[float | None]
    intentions: list[str]
    s: float = 0.0
    dp_index: int = 0
    holding: bool = False
    pending: tuple[int, dict] | None = None
    next_query: int | None = None
    frozen: bool = False
    off_route: bool = False
    action: str | None = None

    def active_hold(self) -> float | None:
        if not self.holding or self.dp_index >= len(self.dp_s):
            return None
        h = self.hold_s[self.dp_index]
        return h if h is not None else self.dp_s[self.dp_index]


@dataclass
class EpisodeResult:
    records: list[dict]
    metrics: EpisodeMetrics
    ledger: BandwidthLedger
    # (tick, ego, fused view, CAV states) at each planner query; in memory only, for rendering
    snapshots: list = field(default_factory=list)

    def log_lines(self) -> list[str]:
        return [json.dumps(r, sort_keys=True, separators=(",", ":")) for r in self.records]

    def log_text(self) -> str:
        return "\n".join(self.log_lines()) + "\n"


# -------------------------------------------------------------- the episode

class Episode:
    def __init__(self, scenario: Scenario, config: SimConfig,
                 planner_factory: Callable[[int], Planner] | None = None,
                 calibrator: NonconformityModel | None = None):
        self.sc = scenario
        self.cfg = config
        self.penalties = dict(config.penalties) if config.penalties is not None else default_penalties()
        self.planner_factory = planner_factory or (lambda ego: MockPlanner(ego_id=ego))
        self.egos = scenario.planning_egos()
        self.planners = {e: self.planner_factory(e) for e in self.egos}
        if calibrator is None and config.calibrator_path:
            calibrator = load_calibrator(config.calibrator_path)
        self.calibrator = calibrator
        self.states: dict[int, CavState] = {c.id: c for c in scenario.cavs}
        self.drivers: dict[int, _Driver] = {}
        for c in scenario.cavs:
            prof = scenario.profile(c.id)
            route = Polyline((c.position,) + tuple(c.route)) if tuple(c.route[0]) != tuple(c.position) \
                else Polyline(c.route)
            self.drivers[c.id] = _Driver(
                c.id, route, prof.cruise_speed, prof.stop_at_goal, prof.extent[0],
                [route.project(dp.position)[0] for dp in prof.decision_points],
                [route.project(dp.hold_position)[0] if dp.hold_position else None for dp in prof.decision_points],
                [dp.intention for dp in prof.decision_points],
            )
        self.static_ids = {o.object_id for o in scenario.objects if all(k.speed == 0.0 for k in o.keyframes)}
        self.ledger = BandwidthLedger()
        self.snapshots: list = []
        self.pending: list[tuple[int, int, MessageEnvelope]] = []
        self.bare_known: dict[int, dict[int, Any]] = {c.id: {} for c in scenario.cavs}
        self.inbox: dict[int, dict[int, tuple[int, SemanticMessage]]] = {c.id: {} for c in scenario.cavs}
        self.contacts: set[tuple[int, int]] = set()
        self.latency_ticks = math.ceil(config.planner_latency_s * scenario.tick_rate - 1e-9)
        self.requery_ticks = max(1, round(config.requery_s * scenario.tick_rate))
        self.lanes = scenario.lanes
        self.describe = DescribeParams()

    # -- perception
    def _calibrator_for(self, cav_id: int) -> NonconformityModel:
        if self.calibrator is not None:
            return self.calibrator
        return default_calibrator(self.sc.profile(cav_id).sensor, self.sc.num_classes)

    def _truth(self, tick: int) -> list[ObjectTruth]:
        out = [o.at(tick) for o in self.sc.objects]
        out += [as_truth(s, self.sc.profile(cid)) for cid, s in self.states.items()]
        return out

    def _detect(self, cav_id: int, tick: int, truth: list[ObjectTruth]) -> list[CalibratedDetection]:
        dets = self.sc.supplied_detections(cav_id, tick)
        if dets is None:
            dets = synthesize_detections(truth, self.states[cav_id], self.sc.profile(cav_id).sensor,
                                         [self.cfg.seed, tick, cav_id], self.sc.num_classes)
        model = self._calibrator_for(cav_id)
        return [calibrate_detection(model, d) for d in dets]

    def _self_detection(self, cav_id: int) -> CalibratedDetection:
        s = self.states[cav_id]
        onehot = tuple(1.0 if i == 0 else 0.0 for i in range(self.sc.num_classes))
        det = Detection(cav_id, cav_id, s.position, self.sc.profile(cav_id).extent, s.speed, onehot, s.heading)
        return calibrate_detection(self._calibrator_for(cav_id), det)

    # -- protocol
    def _deliver(self, tick: int):
        due = [p for p in self.pending if p[0] == tick]
        self.pending = [p for p in self.pending if p[0] != tick]
        due.sort(key=lambda p: (p[0], p[1]))
        for _, sender, env in due:
            for r in env.receiver_ids:
                if env.tier is Tier.BARE:
                    self.bare_known[r][sender] = BarePacket.deserialize(env.payload)
                else:
                    self.inbox[r][sender] = (tick, parse_semantic_message(env.payload))

    def _send(self, env: MessageEnvelope, rec: dict):
        d = transmit(env, self.cfg.channel, self.sc.tick_rate)
        record(self.ledger, env)
        self.pending.append((d.delivered_tick, env.sender_id, env))
        rec["envelopes"].append([env.sender_id, list(env.receiver_ids), env.tier.value, env.payload_bytes,
                                 d.delivered_tick, sig6(d.latency_s)])

    def _broadcast_bare(self, tick: int, rec: dict):
        ids = sorted(self.states)
        for sid in ids:
            payload = make_bare_packet(self.states[sid]).serialize()
            for rid in ids:
                if rid != sid:
                    self._send(make_envelope(sid, (rid,), Tier.BARE, payload, tick), rec)

    def _selected(self, receiver: int) -> list[int]:
        known = self.bare_known[receiver]
        if self.cfg.mode in SPARE_MODES:
            return sorted(spare_select(self.states[receiver], known.values(), self.cfg.spare))
        return sorted(known)

    def _semantic_round(self, tick: int, dets: dict[int, list[CalibratedDetection]], rec: dict):
        images = self.cfg.mode == "uncap_images"
        sends: dict[int, list[int]] = {}
        for r in sorted(self.states):
            sel = self._selected(r)
            rec["selections"][str(r)] = sel
            for h in sel:
                sends.setdefault(h, []).append(r)
        for h in sorted(sends):
            own = dets[h] + [self._self_detection(h)]
            for r in sends[h]:
                pkt = self.bare_known[h].get(r)
                if pkt is None:
                    continue
                pose = _Pose(r, pkt.position, pkt.heading, pkt.velocity)
                objs = [d for d in own if d.object_id != r]
                text, _ = format_semantic_message([solo(d) for d in objs], pose, self.lanes, self.describe)
                payload = SemanticMessage(h, tick, text, tuple(objs)).serialize()
                tier = Tier.IMAGE if images else Tier.SEMANTIC
                env = make_envelope(h, (r,), tier, payload, tick,
                                    image_bytes=self.cfg.image_bytes if images else 0, images_enabled=images)
                self._send(env, rec)

    def _fresh_messages(self, ego: int, tick: int) -> dict[int, SemanticMessage]:
        out = {}
        for sender, (t_del, msg) in sorted(self.inbox[ego].items()):
            if tick - t_del <= self.cfg.hold_window_ticks:
                out[sender] = msg
        return out

    # -- planning
    def _query(self, ego: int, tick: int, dets: list[CalibratedDetection], rec: dict) -> dict:
        drv = self.drivers[ego]
        intention = drv.intentions[drv.dp_index]
        state = self.states[ego]
        planner = self.planners[ego]
        mode = self.cfg.mode
        own = [d for d in dets if d.object_id != ego]
        out: dict[str, Any] = {"ego": ego, "tick": tick, "intention": intention}

        if mode == "no_comm":
            self.snapshots.append((tick, ego, [solo(d) for d in own], list(self.states.values())))
            text, _ = format_semantic_message([solo(d) for d in own], state, self.lanes, self.describe)
            base_q = PlanQuery(text, "", intention)
            out["query"] = text
            try:
                dec = planner.plan(base_q)
                out.update(_decision_fields(dec))
            except PlannerError as e:
                out.update(_fallback_fields(intention, str(e)))
            return out

        msgs = self._fresh_messages(ego, tick)
        fused = select_for_fusion(own, {s: list(m.objects) for s, m in msgs.items()},
                                  self.cfg.fusion_gate_m, self.cfg.match_by_id)
        fused = [f for f in fused if f.object_id != ego]
        self.snapshots.append((tick, ego, fused, list(self.states.values())))
        rec["fused"][str(ego)] = [[f.object_id, sig6(f.p_fused), sig6(f.u_fused), f.best_observer, sig6(f.pmi)]
                                  for f in fused]
        for f in fused:
            if f.p_ego is not None and f.best_observer != ego and not math.isinf(f.pmi):
                rec["perception_pairs"].append([ego, f.object_id, sig6(f.p_ego), sig6(f.p_fused)])

        if mode == "broadcast_all":
            text, _ = format_semantic_message([solo(d) for d in own], state, self.lanes, self.describe)
            base_q = PlanQuery(text, "", intention)
            peer_texts = {s: m.text for s, m in msgs.items()}
            out["query"] = text
            out["peers"] = {str(s): t for s, t in peer_texts.items()}
            try:
                base = planner.plan(base_q)
                final = planner.plan(base_q.with_peers([peer_texts[s] for s in sorted(peer_texts)]))
            except PlannerError as e:
                out.update(_fallback_fields(intention, str(e)))
                return out
            out.update(_decision_fields(final))
            out["included"] = sorted(peer_texts)
            out["base_action"] = base.action
            pw = likelihood_under(base, final.action)
            if pw is not None and pw > 0 and final.probability is not None:
                out["ig_pair"] = [sig6(pw), sig6(final.probability)]
            return out

        # fusion modes: the ego's own view, plus per-peer texts holding only what fusion admitted
        text, _ = format_semantic_message([solo(d) for d in own], state, self.lanes, self.describe)
        base_q = PlanQuery(text, "", intention)
        by_peer: dict[int, list[FusedObject]] = {}
        for f in fused:
            if f.best_observer != ego:
                by_peer.setdefault(f.best_observer, []).append(f)
        peer_texts = {}
        for p, objs in sorted(by_peer.items()):
            peer_texts[p], _ = format_semantic_message(objs, state, self.lanes, self.describe,
                                                       include_ego_line=False)
        out["query"] = text
        out["peers"] = {str(s): t for s, t in peer_texts.items()}
        try:
            res = filter_peer_messages(base_q, peer_texts, planner)
        except PlannerError as e:
            out.update(_fallback_fields(intention, str(e)))
            return out
        out.update(_decision_fields(res.decision))
        out["included"] = list(res.included)
        out["plan_pmis"] = {str(k): sig6(v) for k, v in res.pmis.items()}
        out["flips"] = list(res.flips)
        out["base_action"] = res.base_decision.action
        out["fallback"] = res.fallback
        out["joint_below_base"] = res.joint_below_base
        if res.ig_pair is not None and res.ig_pair[0] > 0:
            out["ig_pair"] = [sig6(res.ig_pair[0]), sig6(res.ig_pair[1])]
        return out

    def _plan_stage(self, tick: int, dets_of: Callable[[int], list[CalibratedDetection]], rec: dict):
        for ego in self.egos:
            drv = self.drivers[ego]
            if drv.frozen:
                continue
            # apply a decision whose planning latency has elapsed
            if drv.pending is not None and drv.pending[0] <= tick:
                self._apply(ego, tick, rec)
            if drv.pending is not None or drv.dp_index >= len(drv.dp_s):
                continue
            due = (not drv.holding and drv.s >= drv.dp_s[drv.dp_index]) or \
                  (drv.holding and drv.next_query is not None and tick >= drv.next_query)
            if not due:
                continue
            dec = self._query(ego, tick, dets_of(ego), rec)
            dec["apply_tick"] = tick + self.latency_ticks
            transcript = getattr(self.planners[ego], "transcript", None)
            if transcript:
                # external planner exchanges go into the log for offline replay
                dec["transcript"] = list(transcript)
                transcript.clear()
            rec["decisions"].append(dec)
            drv.pending = (dec["apply_tick"], dec)
            if self.latency_ticks == 0:
                self._apply(ego, tick, rec)

    def _apply(self, ego: int, tick: int, rec: dict):
        drv = self.drivers[ego]
        _, dec = drv.pending
        drv.pending = None
        drv.action = dec["action"]
        if dec["action"] in ("merge", "proceed"):
            drv.holding = False
            drv.dp_index += 1
            drv.next_query = None
        else:
            drv.holding = True
            drv.next_query = tick + self.requery_ticks
        rec["applied"].append([ego, dec["action"]])

    # -- control
    def _control(self, cid: int) -> Control:
        drv = self.drivers[cid]
        st = self.states[cid]
        v = st.speed
        target = drv.cruise
        hold = drv.active_hold()
        if hold is not None:
            target = min(target, math.sqrt(2.0 * self.cfg.stop_decel * max(0.0, hold - drv.s)))
        if drv.stop_at_goal:
            target = min(target, math.sqrt(2.0 * 2.0 * max(0.0, drv.route.length - drv.s)))
        kp = self.cfg.kinematics
        a_cmd = 2.0 * (target - v)
        throttle = max(0.0, a_cmd) / kp.a_max
        brake = max(0.0, -a_cmd) / kp.b_max
        look = max(4.0, 0.6 * v)
        tx, ty = drv.route.point_at(drv.s + look)
        alpha = wrap_angle(math.atan2(ty - st.position[1], tx - st.position[0]) - st.heading)
        steer = 2.0 * math.sin(alpha) / (look * kp.k_steer)
        return Control(throttle, brake, steer).clamped()

    def _infractions(self, tick: int, rec: dict):
        boxes = {}
        for cid, s in self.states.items():
            ext = self.sc.profile(cid).extent
            boxes[cid] = (s.position, ext[0], ext[1], s.heading)
        for o in self.sc.objects:
            t = o.at(tick + 1)
            boxes[o.object_id] = (t.location, t.extent[0], t.extent[1], t.heading)
        cav_ids = sorted(self.states)
        for i, a in enumerate(cav_ids):
            for b in sorted(boxes):
                if b == a or (b in self.states and b < a):
                    continue
                ca, cb = boxes[a], boxes[b]
                hit = boxes_overlap(ca[0], ca[1], ca[2], ca[3], cb[0], cb[1], cb[2], cb[3])
                key = (a, b)
                if hit and key not in self.contacts:
                    self.contacts.add(key)
                    kind = "collision_static" if b in self.static_ids else "collision_vehicle"
                    actors = [a, b] if b in self.states else [a]
                    for actor in actors:
                        other = b if actor == a else a
                        rec["infractions"].append([kind, actor, other, self.penalties[kind]])
                        self.drivers[actor].frozen = True
                elif not hit:
                    self.contacts.discard(key)
        for cid in cav_ids:
            drv = self.drivers[cid]
            off = drv.route.offset(self.states[cid].position, drv.s - 5.0) > self.cfg.lane_invasion_m
            if off and not drv.off_route:
                rec["infractions"].append(["lane_invasion", cid, None, self.penalties["lane_invasion"]])
            drv.off_route = off

    # -- main loop
    def header(self) -> dict:
        sc = self.sc
        return {
            "type": "header", "schema": SCHEMA, "scenario": sc.name,
            "fingerprint": scenario_fingerprint(sc), "config": self.cfg.describe(),
            "tick_rate": sc.tick_rate, "duration_ticks": sc.duration_ticks,
            "egos": list(self.egos),
            "routes": {str(c): [[sig6(x), sig6(y)] for x, y in d.route.points] for c, d in self.drivers.items()},
            "extents": {str(e): list(sc.extent_of(e)) for e in sc.entity_ids},
            "conflict_pair": list(sc.conflict_pair) if sc.conflict_pair else None,
            "penalties": self.penalties,
        }

    def run(self) -> EpisodeResult:
        sc, cfg = self.sc, self.cfg
        records = [self.header()]
        for tick in range(sc.duration_ticks):
            rec: dict[str, Any] = {
                "type": "tick", "tick": tick,
                "states": {str(c): [sig6(s.position[0]), sig6(s.position[1]), sig6(s.heading), sig6(s.speed)]
                           for c, s in sorted(self.states.items())},
                "objects": {}, "envelopes": [], "selections": {}, "detections": {}, "fused": {},
                "perception_pairs": [], "decisions": [], "applied": [], "infractions": [], "controls": {},
            }
            truth = self._truth(tick)
            for t in truth:
                if t.object_id not in self.states:
                    rec["objects"][str(t.object_id)] = [sig6(t.location[0]), sig6(t.location[1]), sig6(t.heading)]
            for c, d in self.drivers.items():
                d.s = max(d.s, d.route.along(self.states[c].position, d.s - 5.0))

            dets: dict[int, list[CalibratedDetection]] = {}

            def dets_of(cid: int) -> list[CalibratedDetection]:
                if cid not in dets:
                    dets[cid] = self._detect(cid, tick, truth)
                return dets[cid]

            if cfg.comm:
                self._deliver(tick)
                self._broadcast_bare(tick, rec)
                for cid in sorted(self.states):
                    dets_of(cid)
                self._semantic_round(tick, dets, rec)
            self._plan_stage(tick, dets_of, rec)
            for cid in sorted(dets):
                rec["detections"][str(cid)] = [[d.object_id, sig6(d.p_calibrated), sig6(d.u_p)] for d in dets[cid]]

            for cid in sorted(self.states):
                drv = self.drivers[cid]
                if drv.frozen:
                    continue
                u = self._control(cid)
                rec["controls"][str(cid)] = [sig6(u.throttle), sig6(u.brake), sig6(u.steer)]
                self.states[cid] = step_kinematics(self.states[cid], u, sc.dt, cfg.kinematics)
            self._infractions(tick, rec)
            records.append(rec)
        records.append({"type": "end", "ticks": sc.duration_ticks,
                        "final_states": {str(c): [sig6(s.position[0]), sig6(s.position[1]), sig6(s.heading),
                                                  sig6(s.speed)] for c, s in sorted(self.states.items())}})
        return EpisodeResult(records, metrics_from_records(records), self.ledger, self.snapshots)


def _decision_fields(dec: PlanDecision) -> dict:
    return {
        "action": dec.action, "reason": dec.reason,
        "probability": sig6(dec.probability) if dec.probability is not None else None,
        "u_d": sig6(dec.u_d) if dec.u_d is not None else None,
        "fallback": False,
    }


def _fallback_fields(intention: str, error: str) -> dict:
    hold = {"merge": "no_merge", "turn": "yield"}.get(intention, "stop")
    return {"action": hold, "reason": f"planner failure: {error}", "probability": None, "u_d": None,
            "fallback": True}


# ----------------------------------------------------------------- metrics

def metrics_from_records(records: Sequence[dict]) -> EpisodeMetrics:
    """Score an episode purely from its log records."""
    validate_records(records)
    header, ticks, end = records[0], records[1:-1], records[-1]
    mode = header["config"]["mode"]
    egos = [str(e) for e in header["egos"]] or sorted(header["routes"])
    traj: dict[str, list] = {e: [] for e in header["routes"]}
    fail: dict[str, int | None] = {e: None for e in header["routes"]}
    events: dict[str, list[InfractionEvent]] = {e: [] for e in header["routes"]}
    total_bytes = 0
    p_pairs, d_pairs = [], []
    for i, rec in enumerate(ticks):
        for c, st in rec["states"].items():
            traj[c].append((st[0], st[1]))
        for env in rec["envelopes"]:
            total_bytes += env[3]
        for ev in rec["infractions"]:
            kind, actor, _, coeff = ev
            events[str(actor)].append(InfractionEvent(rec["tick"], kind, coeff))
            if kind in TERMINAL_KINDS and fail[str(actor)] is None:
                fail[str(actor)] = i + 1
        for pp in rec["perception_pairs"]:
            p_pairs.append((pp[2], pp[3]))
        for dec in rec["decisions"]:
            if dec.get("ig_pair"):
                d_pairs.append(tuple(dec["ig_pair"]))
    for c, st in end["final_states"].items():
        traj[c].append((st[0], st[1]))

    rcs, ips = [], []
    for e in egos:
        rc = route_completion(traj[e], header["routes"][e], fail[e])
        rcs.append(rc)
        ips.append(infraction_penalty(events[e]))
    rc = sum(rcs) / len(rcs)
    ip = sum(ips) / len(ips)
    ds = sum(driving_score(r, p) for r, p in zip(rcs, ips)) / len(rcs)

    margin = None
    if header.get("conflict_pair"):
        a, b = (str(x) for x in header["conflict_pair"])
        ta = _poses(ticks, a)
        tb = _poses(ticks, b)
        margin = min_distance_margin(ta, tb, header["extents"][a], header["extents"][b])

    return EpisodeMetrics(
        ds=ds, rc=rc, ip=ip,
        tb_kb=None if mode == "no_comm" else total_bytes / 1024.0,
        ig_perception=information_gain(p_pairs),
        ig_decision=None if mode == "no_comm" else information_gain(d_pairs),
        min_distance_margin_m=margin,
    )


def _poses(ticks: Sequence[dict], eid: str) -> list[tuple]:
    out = []
    for rec in ticks:
        if eid in rec["states"]:
            st = rec["states"][eid]
        else:
            st = rec["objects"][eid]
        out.append(((st[0], st[1]), st[2]))
    return out


def validate_records(records: Sequence[dict]) -> None:
    if not records or records[0].get("type") != "header":
        raise LogError("episode log has no header")
    if records[0].get("schema") != SCHEMA:
        raise LogError(f"unsupported log schema {records[0].get('schema')!r}")
    if records[-1].get("type") != "end":
        raise LogError("episode log is truncated (no end record)")
    n = records[-1].get("ticks")
    body = records[1:-1]
    if len(body) != n or any(r.get("type") != "tick" or r.get("tick") != i for i, r in enumerate(body)):
        raise LogError("episode log is truncated or out of order")


# ------------------------------------------------------------- public API

def make_planner_factory(config: SimConfig, endpoint=None) -> Callable[[int], Planner]:
    if config.planner == "mock":
        return lambda ego: MockPlanner(ego_id=ego)
    from .llm import EndpointConfig, LLMPlanner

    ep = endpoint or EndpointConfig()
    return lambda ego: LLMPlanner(ep)


def run_episode(scenario: Scenario, config: SimConfig, planner: Planner | Callable[[int], Planner] | None = None,
                calibrator: NonconformityModel | None = None) -> EpisodeResult:
    if planner is None:
        factory = make_planner_factory(config)
    elif hasattr(planner, "plan"):
        factory = lambda ego: planner  # noqa: E731
    else:
        factory = planner
    return Episode(scenario, config, factory, calibrator).run()


def read_log(path: str | Path) -> list[dict]:
    records = []
    text = Path(path).read_text(encoding="utf-8")
    for i, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise LogError(f"{path}:{i}: {e.msg}") from None
    return records


def write_log(result: EpisodeResult, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(result.log_text(), encoding="utf-8")
    return path


def replay(records: Sequence[dict] | str | Path, scenario: Scenario | None = None) -> EpisodeMetrics:
    """Recompute metrics from a log without running any planner."""
    if not isinstance(records, (list, tuple)):
        records = read_log(records)
    validate_records(records)
    if scenario is not None:
        h = records[0]
        if h.get("scenario") != scenario.name or h.get("fingerprint") != scenario_fingerprint(scenario):
            raise LogError(f"log was recorded for scenario {h.get('scenario')!r}, not {scenario.name!r}")
    return metrics_from_records(records)


@dataclass(frozen=True)
class SuiteRow:
    mode: str
    scenario: str
    seed: int
    metrics: EpisodeMetrics


def run_suite(scenarios: Sequence[Scenario], modes: Sequence[str] = MODES, seeds: Sequence[int] = (0,),
              base: SimConfig = SimConfig(), jobs: int = 1,
              on_result: Callable[[SuiteRow, EpisodeResult], None] | None = None) -> list[SuiteRow]:
    """Cross product of scenarios x modes x seeds; rows come back in that order whatever ``jobs`` is."""
    tasks = [(sc, m, s) for sc in scenarios for m in modes for s in seeds]

    def one(task):
        sc, m, s = task
        res = run_episode(sc, replace(base, mode=m, seed=s))
        return SuiteRow(m, sc.name, s, res.metrics), res

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, tasks))
    else:
        results = [one(t) for t in tasks]
    rows = []
    for row, res in results:
        if on_result is not None:
            on_result(row, res)
        rows.append(row)
    return rows


def aggregate(rows: Iterable[SuiteRow]) -> dict[str, dict[str, float | None]]:
    """Mean of each metric per mode; None-valued metrics are skipped, all-None stays None."""
    by_mode: dict[str, list[EpisodeMetrics]] = {}
    for r in rows:
        by_mode.setdefault(r.mode, []).append(r.metrics)
    out = {}
    for mode, ms in by_mode.items():
        agg = {}
        for name in ("ds", "rc", "ip", "tb_kb", "ig_perception", "ig_decision", "min_distance_margin_m"):
            vals = [getattr(m, name) for m in ms if getattr(m, name) is not None]
            agg[name] = sum(vals) / len(vals) if vals else None
        out[mode] = agg
    return out
