from __future__ import annotations

import math
import uuid

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qkdnet.broker import Broker
from qkdnet.errors import EmptyGroup, NotEndpoint, UnknownLink
from qkdnet.qlink import (
    LOSS_BUDGET_DB,
    KeyBlock,
    LinkLayer,
    LinkSim,
    QuantumLink,
    SwitchGroup,
    active_alice_at,
    active_overlap,
    activity_seconds,
    effective_rate,
    schedule_switch,
)


def make_link(length_km=0.0, atten=0.3, base=10000.0, block=256, state="up",
              link_id="l1", a="alpha", b="beta", seed=1):
    return QuantumLink(
        link_id=link_id, endpoint_a=a, endpoint_b=b, length_km=length_km,
        attenuation_db_per_km=atten, base_rate_bps=base,
        block_size_bits=block, state=state, rng_seed=seed,
    )


# -- link budget ---------------------------------------------------------

# 15 km at 0.3 dB/km is 4.5 dB, and 10000 * 10^(-0.45) comes to this;
# value frozen from a hand calculation.
RATE_15KM = 3548.133892335755


def test_rate_15km_frozen_value():
    assert effective_rate(make_link(length_km=15.0)) == pytest.approx(
        RATE_15KM, abs=1e-6
    )


def test_rate_beyond_budget_is_zero():
    # 70 km at 0.3 dB/km is 21 dB, past the 20 dB cutoff
    assert effective_rate(make_link(length_km=70.0)) == 0.0
    # exactly at the cutoff counts as inadmissible too
    assert effective_rate(make_link(length_km=LOSS_BUDGET_DB / 0.3)) == 0.0


def test_rate_zero_length_is_base_rate():
    assert effective_rate(make_link(length_km=0.0, base=1234.0)) == 1234.0


def test_rate_down_and_degraded_states():
    assert effective_rate(make_link(length_km=1.0, state="down")) == 0.0
    up = effective_rate(make_link(length_km=1.0))
    half = effective_rate(make_link(length_km=1.0, state="degraded"))
    assert half == pytest.approx(up / 2.0)


@settings(max_examples=200, deadline=None)
@given(
    l1=st.floats(0.0, 100.0),
    l2=st.floats(0.0, 100.0),
    atten=st.floats(0.01, 1.0),
    base=st.floats(1.0, 1e6),
)
def test_rate_monotone_in_length(l1, l2, atten, base):
    short, long_ = sorted([l1, l2])
    r_short = effective_rate(make_link(length_km=short, atten=atten, base=base))
    r_long = effective_rate(make_link(length_km=long_, atten=atten, base=base))
    assert r_long <= r_short + 1e-9


def test_link_validation():
    with pytest.raises(ValueError):
        make_link(length_km=-1.0)
    with pytest.raises(ValueError):
        make_link(block=100)  # not a multiple of 8
    with pytest.raises(ValueError):
        make_link(state="flaky")


# -- accumulator ---------------------------------------------------------


def test_step_accumulator_emits_on_third_second():
    # 100 b/s against 256-bit blocks: 100, 200, 300 accrued
    sim = LinkSim(make_link(base=100.0))
    assert sim.step(1.0) == []
    assert sim.step(1.0) == []
    third = sim.step(1.0)
    assert len(third) == 1
    assert sim.accumulated_bits == pytest.approx(44.0)
    assert len(third[0].material) == 256 // 8


def test_step_crossing_timestamps_are_exact():
    sim = LinkSim(make_link(base=256.0))  # one block per second
    blocks = sim.step(2.5)
    assert [b.generated_at for b in blocks] == pytest.approx([1.0, 2.0])


def test_identical_seeds_reproduce_material():
    s1 = LinkSim(make_link(seed=42))
    s2 = LinkSim(make_link(seed=42))
    b1 = s1.step(1.0)
    b2 = s2.step(1.0)
    assert [b.key_id for b in b1] == [b.key_id for b in b2]
    assert [b.material for b in b1] == [b.material for b in b2]


def test_next_crossing_and_harvest_agree():
    sim = LinkSim(make_link(base=100.0))
    t = sim.next_crossing()
    assert t == pytest.approx(2.56)
    assert len(sim.harvest(t)) == 1
    assert sim.accumulated_bits == pytest.approx(0.0, abs=1e-6)


def test_inactive_link_accrues_nothing():
    sim = LinkSim(make_link(base=1000.0))
    sim.active = False
    assert sim.step(10.0) == []
    assert sim.next_crossing() is None


@settings(max_examples=80, deadline=None)
@given(
    base=st.floats(1.0, 5000.0),
    block=st.sampled_from([64, 128, 256, 512]),
    dts=st.lists(st.floats(0.01, 7.0), min_size=1, max_size=25),
)
def test_conservation_within_one_block(base, block, dts):
    sim = LinkSim(make_link(base=base, block=block))
    emitted_bits = 0
    for dt in dts:
        emitted_bits += sum(len(b.material) * 8 for b in sim.step(dt))
    total = base * sum(dts)
    expected = math.floor(total / block + 1e-6) * block
    assert abs(emitted_bits - expected) <= block


# -- switch scheduling -----------------------------------------------------


def test_three_alices_equal_slots():
    group = SwitchGroup("bob", ["a1", "a2", "a3"], 1.0)
    plan = schedule_switch(group, 3.0)
    assert plan == [(0.0, 1.0, "a1"), (1.0, 2.0, "a2"), (2.0, 3.0, "a3")]
    assert activity_seconds(group, 3.0) == {"a1": 1.0, "a2": 1.0, "a3": 1.0}


def test_two_alices_uneven_window():
    group = SwitchGroup("bob", ["a1", "a2"], 1.0)
    totals = activity_seconds(group, 5.0)
    assert totals == {"a1": 3.0, "a2": 2.0}


def test_empty_group_rejected():
    with pytest.raises(EmptyGroup):
        SwitchGroup("bob", [], 1.0)


def test_active_alice_at_boundaries():
    group = SwitchGroup("bob", ["a1", "a2"], 1.0)
    assert active_alice_at(group, 0.0) == "a1"
    assert active_alice_at(group, 0.9999) == "a1"
    assert active_alice_at(group, 1.0) == "a2"
    assert active_alice_at(group, 2.0) == "a1"


@settings(max_examples=100, deadline=None)
@given(
    n=st.integers(1, 5),
    slot=st.floats(0.1, 10.0),
    t=st.floats(0.0, 500.0),
)
def test_exactly_one_alice_active(n, slot, t):
    group = SwitchGroup("bob", [f"a{i}" for i in range(n)], slot)
    owners = [a for a in group.alices if a == active_alice_at(group, t)]
    assert len(owners) == 1


def test_active_overlap_matches_schedule():
    group = SwitchGroup("bob", ["a1", "a2", "a3"], 2.0)
    # a2 owns [2,4) and [8,10); window [3, 9) overlaps 1 + 1 seconds
    assert active_overlap(group, "a2", 3.0, 9.0) == pytest.approx(2.0)
    assert active_overlap(group, "zz", 0.0, 100.0) == 0.0


# -- link layer ----------------------------------------------------------


def make_layer():
    broker = Broker()
    broker.register_service("alpha", "t-alpha")
    broker.register_service("beta", "t-beta")
    layer = LinkLayer(broker)
    sim = layer.add_link(make_link(base=256.0))
    return broker, layer, sim


def test_push_delivers_one_envelope_per_endpoint():
    broker, layer, sim = make_layer()
    block = sim.step(1.0)[0]
    layer.deliver_push(block)
    for name in ("alpha", "beta"):
        got = broker.drain(name, f"t-{name}")
        assert len(got) == 1
        assert got[0].payload_kind == "key_block"
        assert KeyBlock.from_payload(got[0].payload) == block
    assert layer.southbound_push_messages == 2
    # handed over: nothing left on the poll path
    assert sim.pending_count("alpha") == 0


def test_poll_retains_until_both_endpoints_fetch():
    _, layer, sim = make_layer()
    sim.step(1.0)
    got_a = layer.poll_keys("l1", "alpha")
    assert len(got_a) == 1
    assert sim.pending_count("alpha") == 0
    assert sim.pending_count("beta") == 1
    got_b = layer.poll_keys("l1", "beta")
    assert got_b == got_a
    assert sim.pending_count("beta") == 0
    assert layer.poll_keys("l1", "alpha") == []
    assert layer.southbound_poll_messages == 3


def test_poll_rejects_unknown_link_and_stranger():
    _, layer, _ = make_layer()
    with pytest.raises(UnknownLink):
        layer.poll_keys("ghost", "alpha")
    with pytest.raises(NotEndpoint):
        layer.poll_keys("l1", "gamma")


def test_set_state_emits_only_on_actual_transition():
    broker, layer, sim = make_layer()
    broker.register_service("watcher", "t-w")
    broker.subscribe("watcher", "t-w", "link-status")
    assert layer.set_state("l1", "up") is None  # unchanged
    event = layer.set_state("l1", "down", now=2.0)
    assert event is not None and event.new_state == "down"
    assert sim.rate == 0.0
    got = broker.drain("watcher", "t-w")
    assert [e.payload["new_state"] for e in got] == ["down"]
    with pytest.raises(ValueError):
        layer.set_state("l1", "wobbly")


def test_set_state_settles_accrual_before_flipping():
    _, layer, sim = make_layer()
    layer.set_state("l1", "down", now=1.5)
    # 256 b/s for 1.5 s accrued before the outage froze the link
    assert sim.accumulated_bits == pytest.approx(384.0)
    layer.set_state("l1", "up", now=10.0)
    assert sim.accumulated_bits == pytest.approx(384.0)


def test_endpoint_symmetry_after_push_store():
    # both endpoint deliveries carry byte-identical material and id
    broker, layer, sim = make_layer()
    block = sim.step(1.0)[0]
    layer.deliver_push(block)
    got = []
    for name in ("alpha", "beta"):
        env = broker.drain(name, f"t-{name}")[0]
        got.append(KeyBlock.from_payload(env.payload))
    assert got[0].key_id == got[1].key_id
    assert got[0].material == got[1].material


def test_duplicate_link_id_rejected():
    _, layer, _ = make_layer()
    with pytest.raises(ValueError):
        layer.add_link(make_link())


def test_mark_delivered_removes_block():
    _, _, sim = make_layer()
    blocks = sim.step(3.0)
    sim.mark_delivered(blocks[0].key_id)
    assert sim.pending_count("alpha") == len(blocks) - 1
    sim.clear_pending()
    assert sim.pending_count("alpha") == 0
