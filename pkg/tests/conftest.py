"""Shared test fixtures: a hand-pumped broker fabric and key feeders."""

from __future__ import annotations

import uuid
from pathlib import Path

import pytest

from qkdnet.broker import Broker
from qkdnet.kmm import Kmm
from qkdnet.qlink import KeyBlock

SCENARIOS = Path(__file__).parents[1] / "scenarios"


class Net:
    """Instant-delivery harness for component tests.

    The engine drives drains off a virtual clock; unit tests instead call
    pump() to shuttle envelopes until the fabric is quiet.
    """

    def __init__(self):
        self.now = 0.0
        self.broker = Broker(time_source=lambda: self.now)
        self.handlers: dict[str, object] = {}
        self.tokens: dict[str, str] = {}

    def attach(self, name: str, token: str, handler) -> None:
        self.handlers[name] = handler
        self.tokens[name] = token

    def add_kmm(self, kmm: Kmm) -> None:
        self.attach(kmm.kmm_id, kmm.token, kmm)

    def pump(self, max_rounds: int = 200) -> int:
        """Drain every handler until no envelopes move; returns envelope count."""
        moved = 0
        for _ in range(max_rounds):
            quiet = True
            for name in sorted(self.handlers):
                if not self.broker.is_registered(name):
                    continue
                if not self.broker.is_online(name):
                    continue
                envelopes = self.broker.drain(name, self.tokens[name])
                if envelopes:
                    quiet = False
                    moved += len(envelopes)
                for env in envelopes:
                    self.handlers[name].handle_envelope(env, self.now)
            if quiet:
                return moved
        raise AssertionError("fabric did not quiesce")


@pytest.fixture
def net():
    return Net()


def make_block(link_id: str, ident: int, size_bits: int = 256, at: float = 0.0) -> KeyBlock:
    """Deterministic block; ident controls the key-id parity."""
    material = bytes((ident + j) % 256 for j in range(size_bits // 8))
    return KeyBlock(uuid.UUID(int=ident), link_id, material, at)


def feed_pair(kmm_a: Kmm, kmm_b: Kmm, link_id: str, count: int,
              size_bits: int = 256, start: int = 1, at: float = 0.0) -> list[KeyBlock]:
    """Store `count` identical blocks at both ends of one link."""
    blocks = []
    for i in range(count):
        block = make_block(link_id, start + i, size_bits, at)
        kmm_a.store_key(block, at)
        kmm_b.store_key(block, at)
        blocks.append(block)
    return blocks


def wire_pair(net: Net, a: str, b: str, link_id: str, rate: float = 1000.0,
              **kmm_kwargs) -> tuple[Kmm, Kmm]:
    """Two key managers joined by one link, attached to the fabric."""
    ka = Kmm(a, net.broker, **kmm_kwargs)
    kb = Kmm(b, net.broker, **kmm_kwargs)
    ka.wire_link(b, link_id, rate)
    kb.wire_link(a, link_id, rate)
    net.add_kmm(ka)
    net.add_kmm(kb)
    return ka, kb


def wire_chain(net: Net, names: list[str], rate: float = 1000.0,
               **kmm_kwargs) -> dict[str, Kmm]:
    """A line of key managers; link ids are '<left>-<right>'."""
    kmms = {}
    for name in names:
        kmm = Kmm(name, net.broker, **kmm_kwargs)
        kmms[name] = kmm
        net.add_kmm(kmm)
    for left, right in zip(names, names[1:]):
        link_id = f"{left}-{right}"
        kmms[left].wire_link(right, link_id, rate)
        kmms[right].wire_link(left, link_id, rate)
    return kmms
