"""Object-level fusion of calibrated detections across vehicles.

The fused confidence of an object is the best calibrated confidence among the
views that contribute to it; a peer view is only admitted for an object the
ego already sees when it is strictly less uncertain (positive PMI).  Objects
only peers can see always pass, with PMI reported as ``math.inf``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

from .calibration import CalibratedDetection
from .geometry import (
    Polyline,
    absolute_bearing_deg,
    compass16,
    distance,
    relative_bearing_deg,
)
from .scenario import CavState, Detection, Lane

UNSEEN_PMI = math.inf


@dataclass(frozen=True)
class FusedObject:
    object_id: int
    contributing_observers: tuple[int, ...]
    p_fused: float
    u_fused: float
    best_observer: int
    detection: CalibratedDetection
    pmi: float = 0.0
    p_ego: float | None = None

    @property
    def location(self):
        return self.detection.location

    @property
    def speed(self) -> float:
        return self.detection.detection.speed

    @property
    def heading(self) -> float:
        return self.detection.detection.heading


# ---------------------------------------------------------------- matching

def match_objects(ego_dets: Sequence[CalibratedDetection], peer_dets: Sequence[CalibratedDetection],
                  gate_m: float = 2.0, by_id: bool = True) -> list[tuple[CalibratedDetection, CalibratedDetection]]:
    """Pair ego and peer detections of the same object.

    ``by_id`` uses the simulator's ground-truth ids; otherwise greedy
    nearest-centre matching inside ``gate_m``, each detection used once.
    """
    if gate_m <= 0:
        raise ValueError("gate_m must be > 0")
    if by_id:
        peers = {d.object_id: d for d in peer_dets}
        return [(e, peers[e.object_id]) for e in ego_dets if e.object_id in peers]
    candidates = []
    for i, e in enumerate(ego_dets):
        for j, p in enumerate(peer_dets):
            d = distance(e.location, p.location)
            if d <= gate_m:
                candidates.append((d, i, j))
    candidates.sort()
    used_e, used_p, out = set(), set(), []
    for _, i, j in candidates:
        if i in used_e or j in used_p:
            continue
        used_e.add(i)
        used_p.add(j)
        out.append((ego_dets[i], peer_dets[j]))
    return out


# ------------------------------------------------------------------ fusion

def perception_pmi(p_ego: float, p_fused: float) -> float:
    """Natural-log confidence gain; an object the ego cannot see gains ``inf``."""
    if not (0.0 <= p_ego <= 1.0 and 0.0 <= p_fused <= 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    if p_ego == 0.0:
        if p_fused == 0.0:
            raise ValueError("PMI undefined for 0/0")
        return UNSEEN_PMI
    if p_fused == 0.0:
        return -math.inf
    return math.log(p_fused / p_ego)


def fuse(ego_det: CalibratedDetection | None, peer_dets: Sequence[CalibratedDetection]) -> FusedObject:
    """Max-confidence fusion; ties go to the ego, then to the lowest observer id."""
    contributors = ([ego_det] if ego_det is not None else []) + sorted(peer_dets, key=lambda d: d.observer_id)
    if not contributors:
        raise ValueError("fuse needs at least one contributor")
    best = contributors[0]
    for d in contributors[1:]:
        if d.p_calibrated > best.p_calibrated:
            best = d
    p_ego = ego_det.p_calibrated if ego_det is not None else 0.0
    return FusedObject(
        object_id=best.object_id,
        contributing_observers=tuple(d.observer_id for d in contributors),
        p_fused=best.p_calibrated,
        u_fused=best.u_p,
        best_observer=best.observer_id,
        detection=best,
        pmi=perception_pmi(p_ego, best.p_calibrated) if peer_dets or ego_det is None else 0.0,
        p_ego=ego_det.p_calibrated if ego_det is not None else None,
    )


def select_for_fusion(ego_set: Sequence[CalibratedDetection],
                      peer_sets: Mapping[int, Sequence[CalibratedDetection]],
                      gate_m: float = 2.0, by_id: bool = True) -> list[FusedObject]:
    """Fuse the ego's view with peers' views, admitting only uncertainty-reducing contributions."""
    extra: dict[int, list[CalibratedDetection]] = {}
    unseen: list[list[CalibratedDetection]] = []
    for peer_id in sorted(peer_sets):
        dets = peer_sets[peer_id]
        matched = match_objects(ego_set, dets, gate_m, by_id)
        matched_peer = set()
        for e, p in matched:
            matched_peer.add(id(p))
            if p.u_p < e.u_p and perception_pmi(e.p_calibrated, p.p_calibrated) > 0.0:
                extra.setdefault(id(e), []).append(p)
        for p in dets:
            if id(p) in matched_peer:
                continue
            # group ego-unseen detections of the same object across peers
            for group in unseen:
                ref = group[0]
                same = ref.object_id == p.object_id if by_id else distance(ref.location, p.location) <= gate_m
                if same and all(g.observer_id != p.observer_id for g in group):
                    group.append(p)
                    break
            else:
                unseen.append([p])
    fused = [fuse(e, extra.get(id(e), [])) for e in ego_set]
    fused.extend(fuse(None, group) for group in unseen)
    fused.sort(key=lambda f: f.object_id)
    return fused


def solo(det: CalibratedDetection) -> FusedObject:
    """Wrap a single observer's detection without any fusion."""
    return FusedObject(det.object_id, (det.observer_id,), det.p_calibrated, det.u_p,
                       det.observer_id, det, 0.0, det.p_calibrated)


def aggregate_pmi(fused: Iterable[FusedObject]) -> tuple[float, int]:
    """Set-level view: sum of finite per-object PMIs and the count of ego-unseen objects."""
    total, unseen = 0.0, 0
    for f in fused:
        if math.isinf(f.pmi):
            unseen += 1
        else:
            total += f.pmi
    return total, unseen


# -------------------------------------------------------- semantic messages

ADJACENT_NOTE = " - NOTE: This vehicle is in an adjacent lane"


@dataclass(frozen=True)
class DescribeParams:
    close_m: float = 10.0
    fast_mps: float = 5.0


@lru_cache(maxsize=256)
def _lane_line(points: tuple) -> Polyline:
    return Polyline(points)


def lane_of(point, lanes: Sequence[Lane], tol: float = 0.5) -> str | None:
    best, best_d = None, math.inf
    for lane in lanes:
        _, d = _lane_line(tuple(lane.polyline)).project(point)
        if d <= 0.5 * lane.width + tol and d < best_d:
            best, best_d = lane.id, d
    return best


def ego_line(ego: CavState) -> str:
    return f"Ego Vehicle: Facing {compass16(absolute_bearing_deg(ego.heading))}, Speed: {ego.speed:.2f}"


def describe_object(obj: FusedObject, ego: CavState, lanes: Sequence[Lane] = (),
                    params: DescribeParams = DescribeParams(), ego_lane: str | None = None) -> str:
    loc = obj.location
    dist = distance(ego.position, loc)
    direction = compass16(relative_bearing_deg(ego.position, ego.heading, loc))
    facing = compass16((ego.heading - obj.heading) * 180.0 / math.pi)
    speed = obj.speed
    line = (
        f"Vehicle {obj.object_id} (perception confidence {obj.p_fused:.2f}/uncertainty {round(obj.u_fused, 2)}): "
        f"Relative direction to Ego CAV: {direction}, "
        f"Distance: {dist:.2f} ({'close' if dist < params.close_m else 'far'}), "
        f"Facing {facing}, Speed: {speed:.2f} ({'fast' if speed > params.fast_mps else 'slow'})"
    )
    if lanes:
        if ego_lane is None:
            ego_lane = lane_of(ego.position, lanes)
        obj_lane = lane_of(loc, lanes)
        if ego_lane is not None and obj_lane is not None and obj_lane != ego_lane:
            lane = next(ln for ln in lanes if ln.id == obj_lane)
            # only the neighbouring lane counts, not lanes further across
            if Polyline(lane.polyline).project(ego.position)[1] <= 1.5 * lane.width + 0.5:
                line += ADJACENT_NOTE
    return line


def format_semantic_message(fused: Sequence[FusedObject], ego: CavState, lanes: Sequence[Lane] = (),
                            params: DescribeParams = DescribeParams(), include_ego_line: bool = True) -> tuple[str, dict]:
    """Planner-facing text plus the structured per-object payload."""
    ego_lane = lane_of(ego.position, lanes) if lanes else None
    lines = [ego_line(ego)] if include_ego_line else []
    lines += [describe_object(f, ego, lanes, params, ego_lane) for f in fused]
    return "\n\n".join(lines), {str(f.object_id): object_payload(f.detection) for f in fused}


def object_payload(det: CalibratedDetection) -> dict:
    d = det.detection
    return {
        "class": det.predicted_class,
        "angle": round(d.heading, 4),
        "extent": [round(e, 2) for e in d.extent],
        "location": [round(d.location[0], 2), round(d.location[1], 2)],
        "speed": round(d.speed, 2),
        "confidence": det.raw_confidence,
        "class_confidence": list(d.confidence_vector),
        "perception_confidence": det.p_calibrated,
        "uncertainty": det.u_p,
    }


@dataclass(frozen=True)
class SemanticMessage:
    sender_id: int
    tick: int
    text: str
    objects: tuple[CalibratedDetection, ...]

    def serialize(self) -> str:
        return json.dumps(
            {"sender": self.sender_id, "tick": self.tick, "text": self.text,
             "objects": {str(o.object_id): object_payload(o) for o in self.objects}},
            ensure_ascii=False,
        )


def build_semantic_message(sender_id: int, tick: int, dets: Sequence[CalibratedDetection], receiver: CavState,
                           lanes: Sequence[Lane] = (), params: DescribeParams = DescribeParams()) -> SemanticMessage:
    text, _ = format_semantic_message([solo(d) for d in dets], receiver, lanes, params)
    return SemanticMessage(sender_id, tick, text, tuple(dets))


def parse_semantic_message(wire: str) -> SemanticMessage:
    from .calibration import argmax, singleton_threshold

    doc = json.loads(wire)
    sender = int(doc["sender"])
    objs = []
    for key, o in doc["objects"].items():
        conf = tuple(float(c) for c in o["class_confidence"])
        det = Detection(sender, int(key), (float(o["location"][0]), float(o["location"][1])),
                        tuple(float(e) for e in o["extent"]), float(o["speed"]), conf, float(o["angle"]))
        objs.append(CalibratedDetection(det, argmax(conf), singleton_threshold(conf),
                                        float(o["perception_confidence"]), float(o["uncertainty"])))
    return SemanticMessage(sender, int(doc["tick"]), str(doc["text"]), tuple(objs))
