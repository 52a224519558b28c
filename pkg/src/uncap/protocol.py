"""BARE state broadcast, SPARE partner selection, envelopes and the channel model."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

from .scenario import CavState

BARE_MAX_BYTES = 256


class Tier(str, Enum):
    BARE = "bare"
    SEMANTIC = "semantic"
    IMAGE = "image"


@dataclass(frozen=True)
class BarePacket:
    """Minimal state a CAV broadcasts to everyone. Values are kept at wire precision."""

    sender_id: int
    position: tuple[float, float]
    heading: float
    velocity: tuple[float, float]

    def serialize(self) -> str:
        x, y = self.position
        vx, vy = self.velocity
        return (
            f'{{"{self.sender_id}": {{"position": [{x:.2f}, {y:.2f}], '
            f'"heading": {self.heading:.2f}, "velocity": [{vx:.2f}, {vy:.2f}]}}}}'
        )

    @property
    def size(self) -> int:
        return len(self.serialize().encode("utf-8"))

    @classmethod
    def deserialize(cls, text: str) -> "BarePacket":
        doc = json.loads(text)
        if len(doc) != 1:
            raise ValueError("BARE packet must carry exactly one sender")
        (sender, body), = doc.items()
        return cls(
            int(sender),
            (float(body["position"][0]), float(body["position"][1])),
            float(body["heading"]),
            (float(body["velocity"][0]), float(body["velocity"][1])),
        )


def make_bare_packet(state: CavState) -> BarePacket:
    r = lambda v: round(float(v), 2)  # noqa: E731
    return BarePacket(
        state.id,
        (r(state.position[0]), r(state.position[1])),
        r(state.heading),
        (r(state.velocity[0]), r(state.velocity[1])),
    )


@dataclass(frozen=True)
class SpareConfig:
    distance_threshold_m: float = 50.0
    select_stationary: bool = False

    def __post_init__(self):
        if not self.distance_threshold_m > 0:
            raise ValueError("distance_threshold_m must be > 0")


def spare_accepts(ego_pos, goal, peer_pos, peer_vel, config: SpareConfig) -> bool:
    """Distance gate plus the 'heading towards my goal' dot-product test."""
    if math.hypot(ego_pos[0] - peer_pos[0], ego_pos[1] - peer_pos[1]) > config.distance_threshold_m:
        return False
    if config.select_stationary and peer_vel[0] == 0.0 and peer_vel[1] == 0.0:
        return True
    dot = (goal[0] - peer_pos[0]) * peer_vel[0] + (goal[1] - peer_pos[1]) * peer_vel[1]
    return dot > 0.0


def spare_select(ego: CavState, packets: Iterable[BarePacket], config: SpareConfig = SpareConfig()) -> frozenset[int]:
    return frozenset(
        p.sender_id for p in packets
        if p.sender_id != ego.id
        and spare_accepts(ego.position, ego.goal_position, p.position, p.velocity, config)
    )


@dataclass(frozen=True)
class MessageEnvelope:
    sender_id: int
    receiver_ids: tuple[int, ...]
    tier: Tier
    payload_bytes: int
    tick_sent: int
    payload: str = field(default="", compare=False, repr=False)

    def __post_init__(self):
        if self.payload_bytes <= 0:
            raise ValueError("payload_bytes must be > 0")


def make_envelope(sender_id: int, receiver_ids: Sequence[int], tier: Tier | str, payload: str,
                  tick: int, *, image_bytes: int = 0, images_enabled: bool = False) -> MessageEnvelope:
    """Wrap a serialized payload; size is its exact UTF-8 length plus any image attachment."""
    tier = Tier(tier)
    if tier is Tier.IMAGE and not images_enabled:
        raise ValueError("image tier requires image sharing to be enabled")
    if image_bytes and tier is not Tier.IMAGE:
        raise ValueError("image attachments travel on the image tier only")
    size = len(payload.encode("utf-8")) + int(image_bytes)
    return MessageEnvelope(sender_id, tuple(receiver_ids), tier, size, tick, payload)


@dataclass(frozen=True)
class ChannelParams:
    broadcast_rate_bps: float = 1_050_000.0
    groupcast_rate_bps: float = 1_520_000.0
    overhead_s: float = 0.010
    drop_probability: float = 0.0  # experimental; nothing in the engine draws against it yet

    def __post_init__(self):
        if self.broadcast_rate_bps <= 0 or self.groupcast_rate_bps <= 0:
            raise ValueError("channel rates must be > 0")
        if self.overhead_s < 0:
            raise ValueError("overhead must be >= 0")

    def rate_for(self, tier: Tier) -> float:
        return self.broadcast_rate_bps if tier is Tier.BARE else self.groupcast_rate_bps


@dataclass(frozen=True)
class DeliveryRecord:
    latency_s: float
    delivered_tick: int


def transmission_latency(payload_bytes: int, tier: Tier, chan: ChannelParams) -> float:
    return payload_bytes * 8.0 / chan.rate_for(Tier(tier)) + chan.overhead_s


def transmit(env: MessageEnvelope, chan: ChannelParams = ChannelParams(), tick_rate: float = 10.0) -> DeliveryRecord:
    latency = transmission_latency(env.payload_bytes, env.tier, chan)
    return DeliveryRecord(latency, env.tick_sent + math.ceil(latency * tick_rate))


class BandwidthLedger:
    """Per-tick, per-tier byte counts for one episode."""

    def __init__(self):
        self.per_tick: dict[int, dict[str, int]] = defaultdict(lambda: defaultdict(int))
        self.total = 0
        self.envelopes = 0

    def cumulative(self, tick: int) -> int:
        return sum(sum(t.values()) for k, t in self.per_tick.items() if k <= tick)

    def tier_total(self, tier: Tier | str) -> int:
        tier = Tier(tier).value
        return sum(t.get(tier, 0) for t in self.per_tick.values())

    @property
    def total_kb(self) -> float:
        return self.total / 1024.0


def record(ledger: BandwidthLedger, env: MessageEnvelope) -> BandwidthLedger:
    ledger.per_tick[env.tick_sent][env.tier.value] += env.payload_bytes
    ledger.total += env.payload_bytes
    ledger.envelopes += 1
    return ledger
