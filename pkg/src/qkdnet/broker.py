"""In-repo message broker.

All control-plane traffic between the controller, key managers, link
simulators, and application simulators rides here.  Services register
under a unique name with a static token, messages are addressed by
service name (unicast), topic (multicast), or to everyone (broadcast),
and each subscriber has a FIFO queue that survives offline periods: a
service that was down for a software update drains everything it missed
as soon as it reconnects.

Delivery is at-least-once; consumers may dedup by message_id.  The
broker itself never drops or reorders: for a fixed (sender, destination)
pair, drain order equals publish order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import (
    BackPressure,
    DuplicateName,
    InvalidToken,
    Unauthenticated,
    UnknownService,
)

UNICAST = "unicast"
MULTICAST = "multicast"
BROADCAST = "broadcast"


@dataclass
class BrokerEnvelope:
    """One addressed control-plane message; the only inter-service unit.

    ``destination`` is a service name for unicast, a topic string for
    multicast, and None for broadcast.  ``message_id`` and
    ``enqueue_time`` are stamped by the broker at publish time.
    """

    sender: str
    delivery_mode: str
    destination: Optional[str]
    payload_kind: str
    payload: dict
    message_id: int = -1
    enqueue_time: float = 0.0

    def to_json_obj(self) -> dict:
        return {
            "message_id": self.message_id,
            "sender": self.sender,
            "delivery_mode": self.delivery_mode,
            "destination": self.destination,
            "payload_kind": self.payload_kind,
            "payload": self.payload,
            "enqueue_time": self.enqueue_time,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "BrokerEnvelope":
        return cls(
            sender=obj["sender"],
            delivery_mode=obj["delivery_mode"],
            destination=obj["destination"],
            payload_kind=obj["payload_kind"],
            payload=obj["payload"],
            message_id=obj["message_id"],
            enqueue_time=obj["enqueue_time"],
        )


def unicast(sender: str, destination: str, payload_kind: str, payload: dict) -> BrokerEnvelope:
    return BrokerEnvelope(sender, UNICAST, destination, payload_kind, payload)


def multicast(sender: str, topic: str, payload_kind: str, payload: dict) -> BrokerEnvelope:
    return BrokerEnvelope(sender, MULTICAST, topic, payload_kind, payload)


def broadcast(sender: str, payload_kind: str, payload: dict) -> BrokerEnvelope:
    return BrokerEnvelope(sender, BROADCAST, None, payload_kind, payload)


@dataclass
class ServiceRegistration:
    service_name: str
    auth_token: str
    online: bool = True


@dataclass
class Subscription:
    subscriber: str
    topic: str


class Broker:
    """Single logically serialized event processor; see module docstring.

    ``time_source`` supplies the virtual timestamp stamped on envelopes.
    ``on_enqueue`` (if set) is called with the subscriber name after a
    copy lands in its queue; the harness uses it to schedule wake-ups.
    ``max_queue`` caps per-subscriber queue length; publishes that would
    overflow any target queue are rejected whole with BackPressure.
    """

    def __init__(
        self,
        time_source: Optional[Callable[[], float]] = None,
        max_queue: Optional[int] = None,
    ) -> None:
        self._time_source = time_source or (lambda: 0.0)
        self.max_queue = max_queue
        self._registry: dict[str, ServiceRegistration] = {}
        self._queues: dict[str, list[BrokerEnvelope]] = {}
        self._topics: dict[str, list[str]] = {}
        self._next_id = 0
        self.published = 0
        self.enqueued = 0
        self.on_enqueue: Optional[Callable[[str], None]] = None

    # -- registration ------------------------------------------------------

    def register_service(self, name: str, token: str) -> ServiceRegistration:
        """Register a service, or reconnect it if the token matches.

        Re-registration with the same token marks the service online and
        preserves its queue; a different token is a name conflict.
        """
        if not name:
            raise ValueError("service name must be nonempty")
        reg = self._registry.get(name)
        if reg is not None:
            if reg.auth_token != token:
                raise DuplicateName(f"service {name!r} already registered with a different token")
            reg.online = True
            return reg
        reg = ServiceRegistration(name, token)
        self._registry[name] = reg
        self._queues[name] = []
        return reg

    def _auth(self, name: str, token: str) -> ServiceRegistration:
        reg = self._registry.get(name)
        if reg is None:
            raise Unauthenticated(f"{name!r} is not a registered service")
        if reg.auth_token != token:
            raise InvalidToken(f"wrong token for service {name!r}")
        return reg

    def set_offline(self, name: str) -> None:
        reg = self._registry.get(name)
        if reg is None:
            raise UnknownService(name)
        reg.online = False

    def is_online(self, name: str) -> bool:
        reg = self._registry.get(name)
        return reg is not None and reg.online

    def is_registered(self, name: str) -> bool:
        return name in self._registry

    # -- pub/sub -----------------------------------------------------------

    def subscribe(self, subscriber: str, token: str, topic: str) -> Subscription:
        """Start copying future multicasts on ``topic`` to ``subscriber``.

        No retroactive delivery: messages published before the
        subscription are not replayed.
        """
        self._auth(subscriber, token)
        subs = self._topics.setdefault(topic, [])
        if subscriber not in subs:
            subs.append(subscriber)
        return Subscription(subscriber, topic)

    def publish(self, envelope: BrokerEnvelope, token: str) -> int:
        """Enqueue one copy per matching subscriber; returns the copy count.

        The acknowledgment (the return) does not depend on subscriber
        liveness: offline subscribers keep their copies queued.
        """
        self._auth(envelope.sender, token)
        mode = envelope.delivery_mode
        if mode == UNICAST:
            if envelope.destination not in self._registry:
                raise UnknownService(f"unicast to unregistered service {envelope.destination!r}")
            targets = [envelope.destination]
        elif mode == MULTICAST:
            if not envelope.destination:
                raise ValueError("multicast requires a topic")
            targets = list(self._topics.get(envelope.destination, []))
        elif mode == BROADCAST:
            targets = list(self._registry)
        else:
            raise ValueError(f"unknown delivery mode {mode!r}")

        if self.max_queue is not None:
            for name in targets:
                if len(self._queues[name]) >= self.max_queue:
                    raise BackPressure(f"queue for {name!r} is at capacity ({self.max_queue})")

        envelope.message_id = self._next_id
        self._next_id += 1
        envelope.enqueue_time = self._time_source()
        self.published += 1
        for name in targets:
            self._queues[name].append(envelope)
            self.enqueued += 1
            if self.on_enqueue is not None:
                self.on_enqueue(name)
        return len(targets)

    def drain(self, subscriber: str, token: str) -> list[BrokerEnvelope]:
        """Return and remove all queued envelopes, FIFO; marks online."""
        reg = self._auth(subscriber, token)
        reg.online = True
        out = self._queues[subscriber]
        self._queues[subscriber] = []
        return out

    def queue_depth(self, name: str) -> int:
        if name not in self._queues:
            raise UnknownService(name)
        return len(self._queues[name])
