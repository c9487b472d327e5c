"""Per-node Key Management Module.

Stores key blocks arriving from link simulators, serves keys northbound
to applications by count/size (with the far side pinned so both
applications read identical material), opens QoS sessions toward remote
nodes, and relays keys across multiple hops by one-time-pad XOR
re-encryption: each hop decrypts with the key shared on the inbound
link and re-encrypts with the key shared on the outbound link, so only
the endpoints and the trusted intermediate nodes ever see plaintext.

Allocation discipline for a shared pool: both endpoints hold the same
blocks, so each block is self-servable at exactly one end, decided by
key-id parity (even ids belong to the lexicographically smaller node).
The other end only ever touches that block by id, on instruction, which
keeps the two ends from racing for the same material.
"""

from __future__ import annotations

import base64
import random
import uuid
from dataclasses import dataclass, field
from typing import Optional

from .broker import Broker, multicast, unicast
from .errors import (
    AdmissionRejected,
    ExpiredKey,
    InsufficientKeyMaterial,
    InvalidSize,
    UnknownKeyId,
    UnknownSlave,
)
from .eventlog import EventLog
from .keystore import (
    ASSIGNED,
    AVAILABLE,
    CONSUMED,
    EXPIRED,
    RESERVED,
    TERMINAL,
    KeyStore,
    StoredKey,
)
from .qlink import KeyBlock

CONTROLLER = "controller"

REQUESTED = "requested"
ACTIVE = "active"
CLOSED = "closed"

ORIGIN_RELAYED = "relayed"
ORIGIN_SESSION = "session"
ORIGIN_COMPOSED = "composed"
NON_LINK_ORIGINS = (ORIGIN_RELAYED, ORIGIN_SESSION, ORIGIN_COMPOSED)


def xor_bytes(a: bytes, b: bytes) -> bytes:
    if len(a) != len(b):
        raise ValueError("xor operands must have equal length")
    return bytes(x ^ y for x, y in zip(a, b))


@dataclass
class QosSpec:
    key_chunk_size_bits: int = 256
    min_rate_bps: float = 0.0
    ttl_override: Optional[float] = None
    priority: int = 0

    def __post_init__(self) -> None:
        if self.key_chunk_size_bits <= 0 or self.key_chunk_size_bits % 8:
            raise InvalidSize("key_chunk_size_bits must be a positive multiple of 8")
        if self.min_rate_bps < 0:
            raise ValueError("min_rate_bps must be >= 0")


@dataclass
class PathAssignment:
    ksid: uuid.UUID
    nodes: list[str]
    computed_at: float
    degraded: bool = False

    @property
    def trusted_node_count(self) -> int:
        return max(len(self.nodes) - 2, 0)

    def to_payload(self) -> dict:
        return {
            "ksid": str(self.ksid),
            "nodes": list(self.nodes),
            "computed_at": self.computed_at,
            "degraded": self.degraded,
            "trusted_node_count": self.trusted_node_count,
        }

    @classmethod
    def from_payload(cls, obj: dict) -> "PathAssignment":
        return cls(
            ksid=uuid.UUID(obj["ksid"]),
            nodes=list(obj["nodes"]),
            computed_at=obj["computed_at"],
            degraded=obj.get("degraded", False),
        )


@dataclass
class KeyStreamSession:
    ksid: uuid.UUID
    master_sae: str
    slave_sae: str
    qos: QosSpec
    peer_kmm: str
    path: Optional[PathAssignment] = None
    status: str = REQUESTED
    close_reason: str = ""
    in_flight: int = 0


@dataclass
class KeyStoreStatus:
    kmm_id: str
    at: float
    peers: list[dict]

    def to_payload(self) -> dict:
        return {"kmm_id": self.kmm_id, "at": self.at, "peers": self.peers}


@dataclass
class RelayParcel:
    """One hop-encrypted key in transit; hop_index is the receiving node's
    position on the assigned path."""

    ksid: uuid.UUID
    final_destination: str
    hop_index: int
    ciphertext: bytes
    consumed_link_key_id: uuid.UUID
    key_id: uuid.UUID
    source: str
    created_at: float
    ttl: float

    def to_payload(self) -> dict:
        return {
            "ksid": str(self.ksid),
            "final_destination": self.final_destination,
            "hop_index": self.hop_index,
            "ciphertext": base64.b64encode(self.ciphertext).decode("ascii"),
            "consumed_link_key_id": str(self.consumed_link_key_id),
            "key_id": str(self.key_id),
            "source": self.source,
            "created_at": self.created_at,
            "ttl": self.ttl,
        }

    @classmethod
    def from_payload(cls, obj: dict) -> "RelayParcel":
        return cls(
            ksid=uuid.UUID(obj["ksid"]),
            final_destination=obj["final_destination"],
            hop_index=obj["hop_index"],
            ciphertext=base64.b64decode(obj["ciphertext"]),
            consumed_link_key_id=uuid.UUID(obj["consumed_link_key_id"]),
            key_id=uuid.UUID(obj["key_id"]),
            source=obj["source"],
            created_at=obj["created_at"],
            ttl=obj["ttl"],
        )


class Kmm:
    """One node's key manager, wired to the broker as a service."""

    def __init__(
        self,
        kmm_id: str,
        broker: Broker,
        token: Optional[str] = None,
        capacity_bits: Optional[int] = None,
        default_ttl: float = 3600.0,
        retry_budget: int = 3,
        relay_stock: int = 4,
        admission_fraction: float = 0.8,
        rng_seed: int = 0,
        event_log: Optional[EventLog] = None,
    ) -> None:
        self.kmm_id = kmm_id
        self.broker = broker
        self.token = token if token is not None else f"{kmm_id}-token"
        broker.register_service(kmm_id, self.token)
        self.store = KeyStore(capacity_bits)
        self.store.on_transition = self._on_transition
        self.default_ttl = default_ttl
        self.retry_budget = retry_budget
        self.relay_stock = relay_stock
        self.admission_fraction = admission_fraction
        self.event_log = event_log
        self._rng = random.Random(rng_seed)

        # Wiring filled in by the harness (or directly by tests).
        self.neighbors: set[str] = set()
        self.link_by_peer: dict[str, str] = {}
        self.peer_by_link: dict[str, str] = {}
        self.link_rates: dict[str, float] = {}
        self.directory: dict[str, str] = {}
        self.local_saes: set[str] = set()

        self.sessions: dict[uuid.UUID, KeyStreamSession] = {}
        self.paths: dict[uuid.UUID, PathAssignment] = {}
        self._reserved_rate: dict[str, float] = {}
        # Parcels waiting for an outbound link key or a path, keyed by
        # (ksid, key_id) with a retry allowance.
        self._parked_parcels: dict[tuple, dict] = {}
        # Pin entries whose underlying blocks have not arrived yet.
        self._parked_pins: list[dict] = []
        self._starved_sessions: set[uuid.UUID] = set()

        self.keys_stored = 0
        self.keys_served = 0
        self.keys_expired = 0
        self.keys_rejected = 0
        self.relays_initiated = 0
        self.relays_forwarded = 0
        self.relays_delivered = 0
        self.relays_failed = 0
        self.served_bits_per_session: dict[str, int] = {}
        self._latency_sum = 0.0
        self._latency_count = 0

    # -- plumbing ------------------------------------------------------------

    def _emit(self, now: float, kind: str, **fields) -> None:
        if self.event_log is not None:
            self.event_log.emit(now, kind, kmm=self.kmm_id, **fields)

    def _on_transition(self, key: StoredKey, frm: str, to: str, now: float) -> None:
        if to == EXPIRED:
            self.keys_expired += 1
        self._emit(now, "key_transition", key_id=str(key.key_id), frm=frm, to=to)

    def _mint_uuid(self) -> uuid.UUID:
        return uuid.UUID(int=self._rng.getrandbits(128), version=4)

    def _send(self, destination: str, payload_kind: str, payload: dict) -> None:
        self.broker.publish(unicast(self.kmm_id, destination, payload_kind, payload), self.token)

    def wire_link(self, peer: str, link_id: str, rate_bps: float) -> None:
        self.neighbors.add(peer)
        self.link_by_peer[peer] = link_id
        self.peer_by_link[link_id] = peer
        self.link_rates[peer] = rate_bps

    def send_hello(self, now: float) -> None:
        payload = {
            "kmm_id": self.kmm_id,
            "neighbor_ids": sorted(self.neighbors),
            # link map lets the controller tie link-status events to edges
            "links": {peer: self.link_by_peer[peer] for peer in sorted(self.neighbors)},
            "timestamp": now,
        }
        self.broker.publish(multicast(self.kmm_id, "hello", "hello", payload), self.token)

    def handle_envelope(self, env, now: float) -> None:
        kind = env.payload_kind
        p = env.payload
        if kind == "key_block":
            try:
                self.store_key(KeyBlock.from_payload(p), now)
            except Exception:
                pass  # rejection already counted
        elif kind == "key_pin":
            self._handle_pin(p, now)
        elif kind == "relay_parcel":
            self.relay_forward(RelayParcel.from_payload(p), now)
        elif kind == "relay_ack":
            self._handle_ack(p, now)
        elif kind == "relay_fail":
            self._handle_relay_fail(p, now)
        elif kind == "path_assign":
            self._handle_path_assign(p, now)
        elif kind == "no_path":
            self._handle_no_path(p, now)
        # Other kinds are not for key managers; ignore.

    # -- storage ------------------------------------------------------------

    def _allocatable_side(self, key_id: uuid.UUID, peer: str) -> bool:
        even = key_id.int % 2 == 0
        return even == (self.kmm_id < peer)

    def store_key(self, block: KeyBlock, now: float) -> StoredKey:
        """Store one link block; idempotent on key_id; may raise StoreFull."""
        existing = self.store.get(block.key_id)
        if existing is not None:
            return existing
        peer = self.peer_by_link.get(block.link_id)
        if peer is None:
            raise ValueError(f"{self.kmm_id} does not terminate link {block.link_id!r}")
        key = StoredKey(
            key_id=block.key_id,
            material=block.material,
            origin=block.link_id,
            peer=peer,
            created_at=block.generated_at,
            ttl=self.default_ttl,
            allocatable=self._allocatable_side(block.key_id, peer),
        )
        try:
            self.store.add(key)
        except Exception:
            self.keys_rejected += 1
            self._emit(now, "key_rejected", key_id=str(block.key_id), link_id=block.link_id)
            raise
        self.keys_stored += 1
        self._latency_sum += max(now - block.generated_at, 0.0)
        self._latency_count += 1
        self._emit(now, "key_stored", key_id=str(block.key_id), link_id=block.link_id,
                   size_bits=key.size_bits)
        self._after_key_arrival(peer, now)
        return key

    def _after_key_arrival(self, peer: str, now: float) -> None:
        self._retry_pins(now)
        self._retry_parked(now, peer_hint=peer)
        for ksid in list(self._starved_sessions):
            session = self.sessions.get(ksid)
            if session is None or session.status != ACTIVE:
                self._starved_sessions.discard(ksid)
                continue
            if session.path and len(session.path.nodes) > 1 and session.path.nodes[1] == peer:
                self._starved_sessions.discard(ksid)
                self.replenish(session, now)

    # -- northbound serving ---------------------------------------------------

    def _resolve_slave(self, slave_sae: str) -> str:
        peer = self.directory.get(slave_sae)
        if peer is None or peer == self.kmm_id:
            raise UnknownSlave(f"no remote key manager serves {slave_sae!r}")
        return peer

    def _ttl_for_pair(self, master_sae: str, slave_sae: str) -> float:
        for s in self.sessions.values():
            if s.master_sae == master_sae and s.slave_sae == slave_sae and s.status == ACTIVE:
                if s.qos.ttl_override is not None:
                    return s.qos.ttl_override
        return self.default_ttl

    def _plan_draw(self, peer: str, number: int, size: int, now: float) -> list[list[StoredKey]]:
        """Pick segments for `number` keys of `size` bits without mutating."""
        pool = self.store.available_for(peer, now)
        plans = []
        for _ in range(number):
            segs: list[StoredKey] = []
            acc = 0
            while acc < size:
                seg = next(pool, None)
                if seg is None:
                    raise InsufficientKeyMaterial(
                        f"{self.kmm_id}: pool toward {peer!r} cannot cover "
                        f"{number} x {size} bits"
                    )
                segs.append(seg)
                acc += seg.size_bits
            plans.append(segs)
        return plans

    def _commit_serve(
        self, segs: list[StoredKey], size: int, peer: str,
        master_sae: str, slave_sae: str, ttl: float, now: float,
    ) -> StoredKey:
        if len(segs) == 1 and segs[0].size_bits == size:
            key = segs[0]
            self.store.transition(key, ASSIGNED, now)
        else:
            material = b"".join(s.material for s in segs)[: size // 8]
            for s in segs:
                self.store.transition(s, ASSIGNED, now)
                self.store.transition(s, CONSUMED, now)
            key = StoredKey(
                key_id=self._mint_uuid(),
                material=material,
                origin=ORIGIN_COMPOSED,
                peer=peer,
                created_at=now,
                ttl=ttl,
                ksid=segs[0].ksid,
            )
            self.store.add(key)
            self.store.transition(key, ASSIGNED, now)
        key.pinned_for = (master_sae, slave_sae)
        return key

    def get_key(self, master_sae: str, slave_sae: str, number: int = 1,
                size: int = 256, now: float = 0.0) -> list[dict]:
        """Serve `number` keys of `size` bits; pins the ids at the peer."""
        if number < 1:
            raise InvalidSize("number must be >= 1")
        if size <= 0 or size % 8:
            raise InvalidSize("size must be a positive multiple of 8")
        peer = self._resolve_slave(slave_sae)
        plans = self._plan_draw(peer, number, size, now)
        ttl = self._ttl_for_pair(master_sae, slave_sae)
        served = []
        pin_entries = []
        for segs in plans:
            key = self._commit_serve(segs, size, peer, master_sae, slave_sae, ttl, now)
            served.append(key)
            pin_entries.append({
                "key_id": str(key.key_id),
                "size_bits": size,
                "ttl": ttl,
                "segments": [str(s.key_id) for s in segs],
            })
            if key.ksid is not None:
                session = self.sessions.get(key.ksid)
                if session is not None and session.status == ACTIVE:
                    self.replenish(session, now)
        self._send(peer, "key_pin", {
            "master_sae": master_sae,
            "slave_sae": slave_sae,
            "served_at": now,
            "keys": pin_entries,
        })
        bits = number * size
        self.keys_served += number
        label = str(served[0].ksid) if served[0].ksid else f"adhoc:{master_sae}->{slave_sae}"
        self.served_bits_per_session[label] = (
            self.served_bits_per_session.get(label, 0) + bits
        )
        self._emit(now, "key_served", number=number, size_bits=size,
                   master_sae=master_sae, slave_sae=slave_sae)
        return [{"key_id": str(k.key_id), "material": k.material} for k in served]

    def _handle_pin(self, payload: dict, now: float) -> None:
        remaining = []
        for entry in payload["keys"]:
            if not self._apply_pin_entry(payload, entry, now):
                remaining.append(entry)
        if remaining:
            parked = dict(payload)
            parked["keys"] = remaining
            self._parked_pins.append(parked)

    def _apply_pin_entry(self, payload: dict, entry: dict, now: float) -> bool:
        seg_ids = [uuid.UUID(s) for s in entry["segments"]]
        segs = [self.store.get(sid) for sid in seg_ids]
        if any(s is None for s in segs):
            return False  # blocks still in flight; retry after next store
        slave_sae = payload["slave_sae"]
        master_sae = payload["master_sae"]
        size = entry["size_bits"]
        served_id = uuid.UUID(entry["key_id"])
        if len(segs) == 1 and segs[0].key_id == served_id:
            key = segs[0]
            if key.state != AVAILABLE or not self.store.ensure_fresh(key, now):
                return True  # unusable; the slave fetch will surface it
            self.store.transition(key, RESERVED, now)
        else:
            material = b"".join(s.material for s in segs)[: size // 8]
            for s in segs:
                if s.state == AVAILABLE and self.store.ensure_fresh(s, now):
                    self.store.transition(s, ASSIGNED, now)
                    self.store.transition(s, CONSUMED, now)
            key = StoredKey(
                key_id=served_id,
                material=material,
                origin=ORIGIN_COMPOSED,
                peer=self.directory.get(master_sae, payload.get("master_sae", "")),
                created_at=payload["served_at"],
                ttl=entry["ttl"],
                allocatable=False,
            )
            self.store.add(key)
            self.store.transition(key, RESERVED, now)
        key.pinned_for = (master_sae, slave_sae)
        replaces = entry.get("replaces")
        if replaces:
            old = self.store.get(uuid.UUID(replaces))
            if old is not None and old.state not in TERMINAL:
                if old.state == RESERVED:
                    self.store.transition(old, ASSIGNED, now)
                if old.state == AVAILABLE:
                    self.store.transition(old, ASSIGNED, now)
                self.store.transition(old, CONSUMED, now)
        return True

    def _retry_pins(self, now: float) -> None:
        parked = self._parked_pins
        self._parked_pins = []
        for payload in parked:
            self._handle_pin(payload, now)

    def get_key_with_ids(self, slave_sae: str, master_sae: str,
                         key_ids: list, now: float = 0.0) -> list[dict]:
        """Fetch materials previously pinned for this slave; one-time."""
        keys = []
        for kid in key_ids:
            kid = uuid.UUID(kid) if isinstance(kid, str) else kid
            key = self.store.get(kid)
            if key is None or getattr(key, "pinned_for", None) is None:
                raise UnknownKeyId(str(kid))
            if key.pinned_for[1] != slave_sae:
                raise UnknownKeyId(str(kid))
            if key.state == EXPIRED or (key.state == RESERVED and key.expired_by(now)):
                if key.state != EXPIRED:
                    self.store.transition(key, EXPIRED, now)
                raise ExpiredKey(str(kid))
            if key.state != RESERVED:
                raise UnknownKeyId(str(kid))  # already fetched or never pinned
            keys.append(key)
        for key in keys:
            self.store.transition(key, ASSIGNED, now)
        self.keys_served += len(keys)
        self._emit(now, "key_served", number=len(keys),
                   size_bits=sum(k.size_bits for k in keys),
                   master_sae=master_sae, slave_sae=slave_sae)
        return [{"key_id": str(k.key_id), "material": k.material} for k in keys]

    def retire_key(self, key_id: uuid.UUID, requester_sae: str, now: float = 0.0) -> None:
        """Consume a served key its application has discarded (refresh)."""
        key_id = uuid.UUID(key_id) if isinstance(key_id, str) else key_id
        key = self.store.get(key_id)
        if key is None or key.pinned_for is None or requester_sae not in key.pinned_for:
            raise UnknownKeyId(str(key_id))
        if key.state in TERMINAL:
            return
        if key.state == RESERVED:
            self.store.transition(key, ASSIGNED, now)
        if key.state == ASSIGNED:
            self.store.transition(key, CONSUMED, now)

    def replace_key(self, key_id: uuid.UUID, requester_sae: str, now: float = 0.0) -> dict:
        """Retire one assigned key and serve a successor atomically."""
        key_id = uuid.UUID(key_id) if isinstance(key_id, str) else key_id
        old = self.store.get(key_id)
        if old is None or old.state != ASSIGNED or getattr(old, "pinned_for", None) is None:
            raise UnknownKeyId(str(key_id))
        master_sae, slave_sae = old.pinned_for
        if requester_sae not in (master_sae, slave_sae):
            raise UnknownKeyId(str(key_id))
        peer = old.peer
        size = old.size_bits
        plans = self._plan_draw(peer, 1, size, now)  # raises before any change
        ttl = self._ttl_for_pair(master_sae, slave_sae)
        new = self._commit_serve(plans[0], size, peer, master_sae, slave_sae, ttl, now)
        self.store.transition(old, CONSUMED, now)
        self._send(peer, "key_pin", {
            "master_sae": master_sae,
            "slave_sae": slave_sae,
            "served_at": now,
            "keys": [{
                "key_id": str(new.key_id),
                "size_bits": size,
                "ttl": ttl,
                "segments": [str(s.key_id) for s in plans[0]],
                "replaces": str(old.key_id),
            }],
        })
        self.keys_served += 1
        self._emit(now, "key_served", number=1, size_bits=size,
                   master_sae=master_sae, slave_sae=slave_sae)
        if new.ksid is not None:
            session = self.sessions.get(new.ksid)
            if session is not None and session.status == ACTIVE:
                self.replenish(session, now)
        return {"key_id": str(new.key_id), "material": new.material}

    # -- sessions -------------------------------------------------------------

    def open_session(self, master_sae: str, slave_sae: str, qos: QosSpec,
                     now: float = 0.0) -> KeyStreamSession:
        """Open a keyed association; direct peers activate synchronously,
        remote peers wait for a controller path."""
        peer = self._resolve_slave(slave_sae)
        ksid = self._mint_uuid()
        session = KeyStreamSession(ksid, master_sae, slave_sae, qos, peer)
        if peer in self.neighbors:
            self._admit(peer, qos.min_rate_bps)
            session.status = ACTIVE
            self.sessions[ksid] = session
            self._emit(now, "session_active", ksid=str(ksid), path=[self.kmm_id, peer])
            return session
        self.sessions[ksid] = session
        self._send(CONTROLLER, "path_request", {
            "ksid": str(ksid),
            "src": self.kmm_id,
            "dst": peer,
            "master_sae": master_sae,
            "slave_sae": slave_sae,
        })
        return session

    def _admit(self, peer: str, min_rate_bps: float) -> None:
        if min_rate_bps <= 0:
            return
        cap = self.link_rates.get(peer, 0.0) * self.admission_fraction
        already = self._reserved_rate.get(peer, 0.0)
        if already + min_rate_bps > cap:
            raise AdmissionRejected(
                f"{self.kmm_id}->{peer}: reserving {min_rate_bps} b/s would exceed "
                f"{cap} b/s admissible"
            )
        self._reserved_rate[peer] = already + min_rate_bps

    def close_session(self, ksid: uuid.UUID, reason: str = "closed", now: float = 0.0) -> None:
        session = self.sessions.get(ksid)
        if session is None or session.status == CLOSED:
            return
        first_hop = session.path.nodes[1] if session.path else session.peer_kmm
        if session.status == ACTIVE and session.qos.min_rate_bps > 0:
            held = self._reserved_rate.get(first_hop, 0.0)
            self._reserved_rate[first_hop] = max(held - session.qos.min_rate_bps, 0.0)
        session.status = CLOSED
        session.close_reason = reason
        self._emit(now, "session_closed", ksid=str(ksid), reason=reason)

    def _handle_path_assign(self, payload: dict, now: float) -> None:
        assignment = PathAssignment.from_payload(payload)
        known = self.paths.get(assignment.ksid)
        if known is not None and known.computed_at == assignment.computed_at \
                and known.nodes == assignment.nodes:
            return  # duplicate distribute
        self.paths[assignment.ksid] = assignment
        session = self.sessions.get(assignment.ksid)
        if session is not None and assignment.nodes and assignment.nodes[0] == self.kmm_id:
            session.path = assignment
            if session.status == REQUESTED:
                try:
                    self._admit(assignment.nodes[1], session.qos.min_rate_bps)
                except AdmissionRejected:
                    self.close_session(assignment.ksid, "admission_rejected", now)
                    return
                session.status = ACTIVE
                self._emit(now, "session_active", ksid=str(assignment.ksid),
                           path=assignment.nodes)
                self.replenish(session, now)
            elif session.status == ACTIVE:
                self.replenish(session, now)
        self._retry_parked(now)

    def _handle_no_path(self, payload: dict, now: float) -> None:
        ksid = uuid.UUID(payload["ksid"])
        self.close_session(ksid, "no_path", now)

    # -- relay ------------------------------------------------------------------

    def mint_session_key(self, session: KeyStreamSession, now: float) -> StoredKey:
        """Create fresh source-side material to be carried over the relay."""
        size = session.qos.key_chunk_size_bits
        key = StoredKey(
            key_id=self._mint_uuid(),
            material=self._rng.randbytes(size // 8),
            origin=ORIGIN_SESSION,
            peer=session.peer_kmm,
            created_at=now,
            ttl=session.qos.ttl_override if session.qos.ttl_override is not None
                else self.default_ttl,
            confirmed=False,
            ksid=session.ksid,
        )
        self.store.add(key)
        return key

    def _draw_link_key(self, peer: str, size_bits: int, now: float) -> Optional[StoredKey]:
        link_id = self.link_by_peer.get(peer)
        if link_id is None:
            return None
        for key in self.store.available_for(peer, now):
            if key.origin == link_id and key.size_bits == size_bits:
                return key
        return None

    def relay_send(self, session: KeyStreamSession, target_key: StoredKey,
                   now: float = 0.0) -> RelayParcel:
        """First hop: reserve the target, OTP-encrypt with a link key toward
        the next node, ship the parcel.  Starvation leaves the target reserved."""
        path = session.path or self.paths.get(session.ksid)
        if path is None or path.nodes[0] != self.kmm_id or len(path.nodes) < 2:
            raise ValueError(f"session {session.ksid} has no usable path from {self.kmm_id}")
        if target_key.state == AVAILABLE:
            self.store.transition(target_key, RESERVED, now)
        next_hop = path.nodes[1]
        link_key = self._draw_link_key(next_hop, target_key.size_bits, now)
        if link_key is None:
            self._starved_sessions.add(session.ksid)
            raise InsufficientKeyMaterial(
                f"{self.kmm_id}: no link key of {target_key.size_bits} bits toward {next_hop!r}"
            )
        ciphertext = xor_bytes(target_key.material, link_key.material)
        self.store.transition(link_key, ASSIGNED, now)
        self.store.transition(link_key, CONSUMED, now)
        parcel = RelayParcel(
            ksid=session.ksid,
            final_destination=path.nodes[-1],
            hop_index=1,
            ciphertext=ciphertext,
            consumed_link_key_id=link_key.key_id,
            key_id=target_key.key_id,
            source=self.kmm_id,
            created_at=target_key.created_at,
            ttl=target_key.ttl,
        )
        self._send(next_hop, "relay_parcel", parcel.to_payload())
        session.in_flight += 1
        self.relays_initiated += 1
        self._emit(now, "relay_initiated", ksid=str(session.ksid),
                   key_id=str(target_key.key_id))
        return parcel

    def replenish(self, session: KeyStreamSession, now: float) -> None:
        """Keep relay_stock keys ready or in flight for an active session."""
        if session.status != ACTIVE or session.path is None:
            return
        while True:
            ready = [
                k for k in self.store.keys_for(session.peer_kmm)
                if k.ksid == session.ksid and k.state == AVAILABLE and k.confirmed
            ]
            if session.in_flight + len(ready) >= self.relay_stock:
                return
            retry = next(
                (k for k in self.store.keys_for(session.peer_kmm)
                 if k.ksid == session.ksid and k.state == AVAILABLE and not k.confirmed),
                None,
            )
            target = retry if retry is not None else self.mint_session_key(session, now)
            try:
                self.relay_send(session, target, now)
            except InsufficientKeyMaterial:
                return

    def _consume_by_id(self, key: StoredKey, now: float) -> None:
        if key.state == AVAILABLE:
            self.store.transition(key, ASSIGNED, now)
        if key.state == RESERVED:
            self.store.transition(key, ASSIGNED, now)
        if key.state == ASSIGNED:
            self.store.transition(key, CONSUMED, now)

    def relay_forward(self, parcel: RelayParcel, now: float = 0.0):
        """Intermediate/final hop processing; parks on starvation."""
        outcome = self._attempt_forward(parcel, now)
        if outcome == "starved":
            key = (parcel.ksid, parcel.key_id)
            if key in self._parked_parcels:
                entry = self._parked_parcels[key]
                entry["attempts"] -= 1
                if entry["attempts"] <= 0:
                    del self._parked_parcels[key]
                    self._fail_parcel(parcel, "starved", now)
            elif self.retry_budget <= 0:
                self._fail_parcel(parcel, "starved", now)
            else:
                self._parked_parcels[key] = {"parcel": parcel, "attempts": self.retry_budget}
            return None
        if outcome == "waiting_path":
            key = (parcel.ksid, parcel.key_id)
            if key not in self._parked_parcels:
                self._parked_parcels[key] = {"parcel": parcel, "attempts": self.retry_budget}
            return None
        self._parked_parcels.pop((parcel.ksid, parcel.key_id), None)
        return outcome

    def _attempt_forward(self, parcel: RelayParcel, now: float):
        assignment = self.paths.get(parcel.ksid)
        if assignment is None:
            return "waiting_path"
        path = assignment.nodes
        i = parcel.hop_index
        if i <= 0 or i >= len(path) or path[i] != self.kmm_id:
            self._fail_parcel(parcel, "path_mismatch", now)
            return None
        dec_key = self.store.get(parcel.consumed_link_key_id)
        if dec_key is None:
            return "waiting_path"  # inbound block still in flight; retried on arrival
        if dec_key.state in TERMINAL:
            self._fail_parcel(parcel, "key_lost", now)
            return None
        final = i == len(path) - 1
        if final:
            plaintext = xor_bytes(parcel.ciphertext, dec_key.material)
            self._consume_by_id(dec_key, now)
            key = StoredKey(
                key_id=parcel.key_id,
                material=plaintext,
                origin=ORIGIN_RELAYED,
                peer=parcel.source,
                created_at=parcel.created_at,
                ttl=parcel.ttl,
                allocatable=False,
                ksid=parcel.ksid,
            )
            self.store.add(key)
            self.keys_stored += 1
            self.relays_delivered += 1
            self._emit(now, "key_stored", key_id=str(key.key_id),
                       link_id=ORIGIN_RELAYED, size_bits=key.size_bits)
            self._emit(now, "relay_delivered", ksid=str(parcel.ksid),
                       key_id=str(parcel.key_id), hops=len(path) - 1)
            self._send(parcel.source, "relay_ack",
                       {"ksid": str(parcel.ksid), "key_id": str(parcel.key_id)})
            return key
        next_hop = path[i + 1]
        enc_key = self._draw_link_key(next_hop, len(parcel.ciphertext) * 8, now)
        if enc_key is None:
            return "starved"
        # Plaintext exists only between these two XORs; wiped right after.
        plain = bytearray(xor_bytes(parcel.ciphertext, dec_key.material))
        self._consume_by_id(dec_key, now)
        new_cipher = xor_bytes(bytes(plain), enc_key.material)
        for j in range(len(plain)):
            plain[j] = 0
        self.store.transition(enc_key, ASSIGNED, now)
        self.store.transition(enc_key, CONSUMED, now)
        forwarded = RelayParcel(
            ksid=parcel.ksid,
            final_destination=parcel.final_destination,
            hop_index=i + 1,
            ciphertext=new_cipher,
            consumed_link_key_id=enc_key.key_id,
            key_id=parcel.key_id,
            source=parcel.source,
            created_at=parcel.created_at,
            ttl=parcel.ttl,
        )
        self._send(next_hop, "relay_parcel", forwarded.to_payload())
        self.relays_forwarded += 1
        self._emit(now, "relay_forwarded", ksid=str(parcel.ksid), key_id=str(parcel.key_id))
        return forwarded

    def _fail_parcel(self, parcel: RelayParcel, reason: str, now: float) -> None:
        dec_key = self.store.get(parcel.consumed_link_key_id)
        if dec_key is not None and dec_key.state not in TERMINAL:
            self._consume_by_id(dec_key, now)  # partner copy is gone; restore symmetry
        self.relays_failed += 1
        notice = {
            "ksid": str(parcel.ksid),
            "key_id": str(parcel.key_id),
            "at_node": self.kmm_id,
            "reason": reason,
        }
        if self.broker.is_registered(CONTROLLER):
            self._send(CONTROLLER, "relay_fail", notice)
        if self.broker.is_registered(parcel.source):
            self._send(parcel.source, "relay_fail", notice)
        self._emit(now, "relay_failed", ksid=str(parcel.ksid),
                   key_id=str(parcel.key_id), reason=reason)

    def _handle_ack(self, payload: dict, now: float) -> None:
        key = self.store.get(uuid.UUID(payload["key_id"]))
        session = self.sessions.get(uuid.UUID(payload["ksid"]))
        if key is not None and key.state == RESERVED:
            key.confirmed = True
            self.store.transition(key, AVAILABLE, now)
        if session is not None:
            session.in_flight = max(session.in_flight - 1, 0)
            self.replenish(session, now)

    def _handle_relay_fail(self, payload: dict, now: float) -> None:
        ksid = uuid.UUID(payload["ksid"])
        session = self.sessions.get(ksid)
        if session is None:
            return  # notice addressed to the controller's copy of this kind
        key = self.store.get(uuid.UUID(payload["key_id"]))
        if key is not None and key.state == RESERVED:
            self.store.transition(key, AVAILABLE, now)
        session.in_flight = max(session.in_flight - 1, 0)
        self._starved_sessions.add(ksid)

    def _retry_parked(self, now: float, peer_hint: Optional[str] = None) -> None:
        for key in list(self._parked_parcels):
            entry = self._parked_parcels.get(key)
            if entry is None:
                continue
            self.relay_forward(entry["parcel"], now)

    # -- maintenance ------------------------------------------------------------

    def expire_keys(self, now: float) -> int:
        return self.store.expire_keys(now)

    def sweep(self, now: float) -> None:
        """Periodic upkeep: TTL sweep plus parked-work retries."""
        self.expire_keys(now)
        self._retry_pins(now)
        self._retry_parked(now)

    def report_status(self, now: float = 0.0) -> KeyStoreStatus:
        """Snapshot per-peer fill and multicast it on the key-status topic."""
        peers = sorted(set(self.store.peers()) | self.neighbors)
        rows = []
        for peer in peers:
            rows.append({
                "peer_id": peer,
                "stored_key_bits": self.store.stored_bits(peer),
                "reserved_key_bits": self.store.reserved_bits(peer),
                "fill_fraction": self.store.fill_fraction(peer),
                "link_id": self.link_by_peer.get(peer),
            })
        status = KeyStoreStatus(self.kmm_id, now, rows)
        self.broker.publish(
            multicast(self.kmm_id, "key-status", "key_status", status.to_payload()),
            self.token,
        )
        return status

    def status_for(self, slave_sae: str, now: float = 0.0) -> dict:
        """Northbound status: what is servable right now toward one slave."""
        peer = self._resolve_slave(slave_sae)
        bits = self.store.available_bits(peer, now)
        sizes = [k.size_bits for k in self.store.available_for(peer, now)]
        key_size = sizes[0] if sizes else 256
        return {
            "source_kme_id": self.kmm_id,
            "target_kme_id": peer,
            "slave_sae_id": slave_sae,
            "key_size": key_size,
            "stored_key_count": bits // key_size if key_size else 0,
            "available_bits": bits,
        }

    def stats(self) -> dict:
        mean_latency = (
            self._latency_sum / self._latency_count if self._latency_count else 0.0
        )
        return {
            "kmm_id": self.kmm_id,
            "keys_stored": self.keys_stored,
            "keys_served": self.keys_served,
            "keys_expired": self.keys_expired,
            "keys_rejected": self.keys_rejected,
            "relays_initiated": self.relays_initiated,
            "relays_forwarded": self.relays_forwarded,
            "relays_delivered": self.relays_delivered,
            "relays_failed": self.relays_failed,
            "served_bits_per_session": dict(sorted(self.served_bits_per_session.items())),
            "mean_retrieval_latency_s": mean_latency,
        }
