"""Key lifecycle store used by every key manager.

A key moves available -> reserved -> assigned -> consumed, may be
released from reserved back to available, and expires from any
non-terminal state once its age exceeds the TTL (strict: expired only
when now > created_at + ttl).  Terminal states zeroize the material.
Keys are pooled per peer (the remote key manager they are shared with)
and drawn oldest-first.
"""

from __future__ import annotations

import uuid
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

from .errors import IllegalTransition, StoreFull

AVAILABLE = "available"
RESERVED = "reserved"
ASSIGNED = "assigned"
CONSUMED = "consumed"
EXPIRED = "expired"

TERMINAL = frozenset({CONSUMED, EXPIRED})

# assigned keys still age out: the TTL sweep covers every non-terminal
# state, so assigned -> expired is legal alongside assigned -> consumed.
LEGAL_TRANSITIONS = {
    AVAILABLE: frozenset({RESERVED, ASSIGNED, EXPIRED}),
    RESERVED: frozenset({ASSIGNED, EXPIRED, AVAILABLE}),
    ASSIGNED: frozenset({CONSUMED, EXPIRED}),
    CONSUMED: frozenset(),
    EXPIRED: frozenset(),
}

DEFAULT_TTL = 3600.0


@dataclass
class StoredKey:
    """One unit of secret material plus its allocation bookkeeping.

    origin is the producing link_id, or "relayed" for keys that arrived
    over a multi-hop relay.  allocatable marks which endpoint may draw
    this key on its own initiative (the other side only touches it by
    id, so the two ends never race for the same block).  confirmed is
    False for session keys awaiting the far end's delivery ack.
    """

    key_id: uuid.UUID
    material: bytes
    origin: str
    peer: str
    created_at: float
    ttl: float = DEFAULT_TTL
    state: str = AVAILABLE
    allocatable: bool = True
    confirmed: bool = True
    ksid: Optional[uuid.UUID] = None
    # (master_sae, slave_sae) once served northbound; gates fetch-by-id.
    pinned_for: Optional[tuple] = None

    @property
    def size_bits(self) -> int:
        return len(self.material) * 8

    def expired_by(self, now: float) -> bool:
        return now > self.created_at + self.ttl


class KeyStore:
    """Per-peer pools of StoredKeys with legal-transition enforcement.

    capacity_bits caps each peer pool; adds that would overflow raise
    StoreFull and change nothing.  on_transition (if set) is called with
    (key, from_state, to_state, now) after every state change.
    """

    def __init__(self, capacity_bits: Optional[int] = None) -> None:
        self.capacity_bits = capacity_bits
        self._pools: dict[str, dict[uuid.UUID, StoredKey]] = {}
        self._index: dict[uuid.UUID, StoredKey] = {}
        self.on_transition: Optional[Callable[[StoredKey, str, str, float], None]] = None

    # -- content -----------------------------------------------------------

    def add(self, key: StoredKey) -> bool:
        """Insert a key; returns False (no-op) when the id is already held."""
        if key.key_id in self._index:
            return False
        if self.capacity_bits is not None:
            if self.stored_bits(key.peer) + key.size_bits > self.capacity_bits:
                raise StoreFull(
                    f"peer pool {key.peer!r} at capacity {self.capacity_bits} bits"
                )
        self._pools.setdefault(key.peer, {})[key.key_id] = key
        self._index[key.key_id] = key
        return True

    def get(self, key_id: uuid.UUID) -> Optional[StoredKey]:
        return self._index.get(key_id)

    def __contains__(self, key_id: uuid.UUID) -> bool:
        return key_id in self._index

    def peers(self) -> list[str]:
        return list(self._pools)

    def keys_for(self, peer: str) -> Iterator[StoredKey]:
        return iter(self._pools.get(peer, {}).values())

    def all_keys(self) -> Iterator[StoredKey]:
        return iter(self._index.values())

    # -- lifecycle ---------------------------------------------------------

    def transition(self, key: StoredKey, to_state: str, now: float) -> None:
        frm = key.state
        if to_state not in LEGAL_TRANSITIONS.get(frm, frozenset()):
            raise IllegalTransition(f"key {key.key_id} cannot move {frm} -> {to_state}")
        key.state = to_state
        if to_state in TERMINAL:
            key.material = b""
        if self.on_transition is not None:
            self.on_transition(key, frm, to_state, now)

    def ensure_fresh(self, key: StoredKey, now: float) -> bool:
        """Expire the key in place if its TTL has lapsed; True if still live."""
        if key.state in TERMINAL:
            return False
        if key.expired_by(now):
            self.transition(key, EXPIRED, now)
            return False
        return True

    def expire_keys(self, now: float) -> int:
        """Sweep every non-terminal key past its TTL; returns the count."""
        count = 0
        for key in self._index.values():
            if key.state not in TERMINAL and key.expired_by(now):
                self.transition(key, EXPIRED, now)
                count += 1
        return count

    # -- allocation --------------------------------------------------------

    def available_for(
        self, peer: str, now: float, allocatable_only: bool = True
    ) -> Iterator[StoredKey]:
        """Live available keys for a peer, oldest-first; expires stale ones."""
        for key in list(self._pools.get(peer, {}).values()):
            if key.state != AVAILABLE:
                continue
            if not self.ensure_fresh(key, now):
                continue
            if allocatable_only and not key.allocatable:
                continue
            if not key.confirmed:
                continue
            yield key

    def available_bits(self, peer: str, now: float, allocatable_only: bool = True) -> int:
        return sum(k.size_bits for k in self.available_for(peer, now, allocatable_only))

    # -- accounting --------------------------------------------------------

    def stored_bits(self, peer: str) -> int:
        return sum(
            k.size_bits for k in self._pools.get(peer, {}).values()
            if k.state not in TERMINAL
        )

    def reserved_bits(self, peer: str) -> int:
        return sum(
            k.size_bits for k in self._pools.get(peer, {}).values()
            if k.state == RESERVED
        )

    def fill_fraction(self, peer: str) -> Optional[float]:
        # An unbounded store has no meaningful congestion signal.
        if not self.capacity_bits:
            return None
        return self.stored_bits(peer) / self.capacity_bits
