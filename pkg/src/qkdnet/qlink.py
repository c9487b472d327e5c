"""Simulated point-to-point QKD links.

A link produces identical key blocks at both endpoints at a rate set by
its fibre budget: loss_db = length_km * attenuation_db_per_km, rate =
base_rate_bps * 10^(-loss_db/10), zero at or beyond 20 dB or when the
link is down, halved when degraded.  Material comes from a per-link
seeded stream so runs replay exactly.

Delivery southbound is either push (one unicast envelope per endpoint
the moment a block is ready) or poll (blocks parked per endpoint until
fetched).  An optical switch scheduler time-shares one Bob among
several Alices in round-robin slots; only the active pair's link
accrues key bits.
"""

from __future__ import annotations

import base64
import math
import random
import uuid
from dataclasses import dataclass, field
from typing import Optional

from .broker import Broker, multicast, unicast
from .errors import EmptyGroup, NotEndpoint, UnknownLink

LOSS_BUDGET_DB = 20.0
# Accumulator comparisons tolerate this much float drift, in bits.
BIT_FUZZ = 1e-6

UP = "up"
DOWN = "down"
DEGRADED = "degraded"
LINK_STATES = (UP, DOWN, DEGRADED)


@dataclass
class QuantumLink:
    """Static description of one device pair and its fibre."""

    link_id: str
    endpoint_a: str
    endpoint_b: str
    length_km: float
    attenuation_db_per_km: float
    base_rate_bps: float
    block_size_bits: int = 256
    state: str = UP
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.length_km < 0:
            raise ValueError("length_km must be >= 0")
        if self.attenuation_db_per_km < 0:
            raise ValueError("attenuation_db_per_km must be >= 0")
        if self.block_size_bits <= 0 or self.block_size_bits % 8:
            raise ValueError("block_size_bits must be a positive multiple of 8")
        if self.state not in LINK_STATES:
            raise ValueError(f"unknown link state {self.state!r}")

    @property
    def total_loss_db(self) -> float:
        return self.length_km * self.attenuation_db_per_km

    @property
    def endpoints(self) -> tuple[str, str]:
        return (self.endpoint_a, self.endpoint_b)


def effective_rate(link: QuantumLink) -> float:
    """Key rate in bits/second under the link's current budget and state."""
    if link.state == DOWN:
        return 0.0
    loss = link.total_loss_db
    if loss >= LOSS_BUDGET_DB:
        return 0.0
    rate = link.base_rate_bps * 10.0 ** (-loss / 10.0)
    if link.state == DEGRADED:
        rate /= 2.0
    return rate


@dataclass
class KeyBlock:
    """One block of shared secret material, identical at both endpoints."""

    key_id: uuid.UUID
    link_id: str
    material: bytes
    generated_at: float

    def to_payload(self) -> dict:
        return {
            "key_id": str(self.key_id),
            "link_id": self.link_id,
            "material": base64.b64encode(self.material).decode("ascii"),
            "generated_at": self.generated_at,
        }

    @classmethod
    def from_payload(cls, obj: dict) -> "KeyBlock":
        return cls(
            key_id=uuid.UUID(obj["key_id"]),
            link_id=obj["link_id"],
            material=base64.b64decode(obj["material"]),
            generated_at=obj["generated_at"],
        )


@dataclass
class LinkStatusEvent:
    link_id: str
    new_state: str
    timestamp: float
    detail: str = ""

    def to_payload(self) -> dict:
        return {
            "link_id": self.link_id,
            "new_state": self.new_state,
            "timestamp": self.timestamp,
            "detail": self.detail,
        }


@dataclass
class SwitchGroup:
    """One Bob time-shared among several Alices, round-robin."""

    bob: str
    alices: list[str]
    slot_duration: float

    def __post_init__(self) -> None:
        if not self.alices:
            raise EmptyGroup(f"switch group for {self.bob!r} has no alices")
        if self.slot_duration <= 0:
            raise ValueError("slot_duration must be > 0")


def active_alice_at(group: SwitchGroup, t: float) -> str:
    """The alice whose slot contains virtual instant t (slots start at 0)."""
    # Nudge off slot boundaries so t=1.0 with slot 1.0 lands in slot 1,
    # even when the division comes out at 0.9999999...
    slot = int(math.floor(t / group.slot_duration + BIT_FUZZ))
    return group.alices[slot % len(group.alices)]


def schedule_switch(group: SwitchGroup, dt: float) -> list[tuple[float, float, str]]:
    """Slot plan over [0, dt): list of (start, end, active alice)."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    plan = []
    t = 0.0
    i = 0
    while t < dt - BIT_FUZZ:
        end = min((i + 1) * group.slot_duration, dt)
        plan.append((t, end, group.alices[i % len(group.alices)]))
        t = end
        i += 1
    return plan


def activity_seconds(group: SwitchGroup, dt: float) -> dict[str, float]:
    """Total active seconds per alice over [0, dt)."""
    totals = {alice: 0.0 for alice in group.alices}
    for start, end, alice in schedule_switch(group, dt):
        totals[alice] += end - start
    return totals


def active_overlap(group: SwitchGroup, alice: str, t0: float, t1: float) -> float:
    """Seconds within [t0, t1) during which `alice` holds the switch."""
    if alice not in group.alices:
        return 0.0
    total = 0.0
    slot = group.slot_duration
    n = len(group.alices)
    idx = group.alices.index(alice)
    # Walk whole slots covering [t0, t1).
    first = int(math.floor(t0 / slot + BIT_FUZZ))
    last = int(math.ceil(t1 / slot - BIT_FUZZ))
    for s in range(first, last):
        if s % n != idx:
            continue
        lo = max(t0, s * slot)
        hi = min(t1, (s + 1) * slot)
        if hi > lo:
            total += hi - lo
    return total


class LinkSim:
    """Runtime state for one link: rng stream, accumulator, pending blocks.

    Two stepping styles share the accumulator: coarse step(dt) emitting
    every whole block inside the window with exact crossing timestamps,
    and the harness's event-driven flow (accrue_to + next_crossing +
    step landing exactly on crossings).  `active` gates accrual for
    links parked behind an optical switch.
    """

    def __init__(self, link: QuantumLink) -> None:
        self.link = link
        self._rng = random.Random(link.rng_seed)
        self.accumulated_bits = 0.0
        self.last_accrual_time = 0.0
        self.active = True
        self.generated_blocks = 0
        self.generated_bits = 0
        # Pending poll-mode blocks: block plus the set of endpoints that
        # have already fetched it; dropped once both have.
        self._pending: list[tuple[KeyBlock, set]] = []

    @property
    def rate(self) -> float:
        return effective_rate(self.link) if self.active else 0.0

    def _mint_block(self, at: float) -> KeyBlock:
        key_id = uuid.UUID(int=self._rng.getrandbits(128), version=4)
        material = self._rng.randbytes(self.link.block_size_bits // 8)
        self.generated_blocks += 1
        self.generated_bits += self.link.block_size_bits
        return KeyBlock(key_id, self.link.link_id, material, at)

    def step(self, dt: float, now: Optional[float] = None) -> list[KeyBlock]:
        """Accrue dt seconds of key generation, emitting whole blocks.

        Block timestamps are the exact crossing instants inside the
        window; the fractional remainder carries over.
        """
        if dt <= 0:
            raise ValueError("dt must be > 0")
        start = self.last_accrual_time if now is None else now - dt
        rate = self.rate
        block = float(self.link.block_size_bits)
        a0 = self.accumulated_bits
        total = a0 + rate * dt
        n = int(math.floor(total / block + BIT_FUZZ))
        blocks = []
        for i in range(1, n + 1):
            t_cross = start + ((i * block) - a0) / rate if rate > 0 else start + dt
            t_cross = min(max(t_cross, start), start + dt)
            blocks.append(self._mint_block(t_cross))
        self.accumulated_bits = max(total - n * block, 0.0)
        self.last_accrual_time = start + dt
        for b in blocks:
            self._pending.append((b, set()))
        return blocks

    def accrue_to(self, t: float) -> None:
        """Advance the accumulator to instant t without emitting."""
        if t < self.last_accrual_time:
            raise ValueError("accrual time went backwards")
        self.accumulated_bits += self.rate * (t - self.last_accrual_time)
        self.last_accrual_time = t

    def next_crossing(self) -> Optional[float]:
        """Instant the accumulator next reaches a whole block, or None."""
        rate = self.rate
        if rate <= 0:
            return None
        deficit = self.link.block_size_bits - self.accumulated_bits
        return self.last_accrual_time + max(deficit, 0.0) / rate

    def harvest(self, now: float) -> list[KeyBlock]:
        """Accrue to `now` and emit every whole block, stamped at `now`.

        The harness schedules this exactly at block-crossing instants,
        so each call normally yields one block.
        """
        self.accrue_to(now)
        block = float(self.link.block_size_bits)
        blocks = []
        while self.accumulated_bits >= block - BIT_FUZZ:
            self.accumulated_bits = max(self.accumulated_bits - block, 0.0)
            blocks.append(self._mint_block(now))
        for b in blocks:
            self._pending.append((b, set()))
        return blocks

    def take_pending(self, endpoint: str, max_count: int) -> list[KeyBlock]:
        out = []
        for entry in self._pending:
            if len(out) >= max_count:
                break
            block, fetched = entry
            if endpoint not in fetched:
                fetched.add(endpoint)
                out.append(block)
        self._pending = [e for e in self._pending if len(e[1]) < 2]
        return out

    def mark_delivered(self, key_id: uuid.UUID) -> None:
        """Drop a block from the undelivered list (push handed it over)."""
        self._pending = [e for e in self._pending if e[0].key_id != key_id]

    def pending_count(self, endpoint: str) -> int:
        return sum(1 for _, fetched in self._pending if endpoint not in fetched)

    def clear_pending(self) -> None:
        self._pending.clear()


class LinkLayer:
    """All links plus switch groups, wired to the broker for delivery.

    Registered as one broker service; emits link-status multicasts and,
    in push mode, key_block unicasts to both endpoint key managers.
    """

    SERVICE = "qlink-sim"

    def __init__(self, broker: Broker, token: str = "qlink-token") -> None:
        self.broker = broker
        self.token = token
        broker.register_service(self.SERVICE, token)
        self.links: dict[str, LinkSim] = {}
        self.switch_groups: list[SwitchGroup] = []
        self.southbound_push_messages = 0
        self.southbound_poll_messages = 0

    def add_link(self, link: QuantumLink) -> LinkSim:
        if link.link_id in self.links:
            raise ValueError(f"duplicate link_id {link.link_id!r}")
        sim = LinkSim(link)
        self.links[link.link_id] = sim
        return sim

    def add_switch_group(self, group: SwitchGroup) -> None:
        self.switch_groups.append(group)

    def _get(self, link_id: str) -> LinkSim:
        sim = self.links.get(link_id)
        if sim is None:
            raise UnknownLink(link_id)
        return sim

    def link_for_pair(self, a: str, b: str) -> Optional[LinkSim]:
        for sim in self.links.values():
            if {sim.link.endpoint_a, sim.link.endpoint_b} == {a, b}:
                return sim
        return None

    def deliver_push(self, block: KeyBlock) -> tuple[int, int]:
        """Unicast the block to both endpoint key managers; returns (1, 1)."""
        sim = self._get(block.link_id)
        acks = []
        for endpoint in sim.link.endpoints:
            env = unicast(self.SERVICE, endpoint, "key_block", block.to_payload())
            acks.append(self.broker.publish(env, self.token))
            self.southbound_push_messages += 1
        sim.mark_delivered(block.key_id)
        return (acks[0], acks[1])

    def poll_keys(self, link_id: str, caller: str, max_count: int = 64) -> list[KeyBlock]:
        """Fetch up to max_count undelivered blocks for one endpoint."""
        sim = self._get(link_id)
        if caller not in sim.link.endpoints:
            raise NotEndpoint(f"{caller!r} does not terminate link {link_id!r}")
        self.southbound_poll_messages += 1
        return sim.take_pending(caller, max_count)

    def set_state(self, link_id: str, state: str, now: float = 0.0,
                  detail: str = "") -> Optional[LinkStatusEvent]:
        """Change link state; multicast one event per actual transition."""
        if state not in LINK_STATES:
            raise ValueError(f"unknown link state {state!r}")
        sim = self._get(link_id)
        if sim.link.state == state:
            return None
        sim.accrue_to(max(now, sim.last_accrual_time))
        sim.link.state = state
        event = LinkStatusEvent(link_id, state, now, detail)
        env = multicast(self.SERVICE, "link-status", "link_status", event.to_payload())
        self.broker.publish(env, self.token)
        return event

    def announce_state(self, link_id: str, now: float = 0.0,
                       detail: str = "") -> LinkStatusEvent:
        """Multicast the current state without changing it (bootstrap use)."""
        sim = self._get(link_id)
        event = LinkStatusEvent(link_id, sim.link.state, now, detail)
        env = multicast(self.SERVICE, "link-status", "link_status", event.to_payload())
        self.broker.publish(env, self.token)
        return event
