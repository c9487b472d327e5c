"""Scenario parsing and validation, including the shipped files."""

import pytest

from qkdnet.errors import DanglingReference, ParseError, ScenarioError
from qkdnet.scenario import load_scenario, parse_scenario

from conftest import SCENARIOS

MINIMAL = """
[scenario]
name = "mini"
duration = 10.0
seed = 42

[[node]]
kmm_id = "n1"

[[node]]
kmm_id = "n2"

[[link]]
link_id = "l1"
endpoints = ["n1", "n2"]
length_km = 10.0
attenuation_db_per_km = 0.2
base_rate_bps = 1000.0
"""


def test_minimal_scenario_parses_with_defaults():
    cfg = parse_scenario(MINIMAL)
    assert cfg.name == "mini"
    assert cfg.duration == 10.0
    assert cfg.seed == 42
    assert cfg.delivery_mode == "push"
    assert cfg.poll_period == 1.0
    assert cfg.fill_threshold == 0.2
    assert [n.kmm_id for n in cfg.nodes] == ["n1", "n2"]
    link = cfg.links[0]
    assert (link.endpoint_a, link.endpoint_b) == ("n1", "n2")
    assert link.block_size_bits == 256
    assert link.initial_state == "up"
    assert cfg.saes == [] and cfg.events == []


def test_overrides_do_not_mutate_the_original():
    cfg = parse_scenario(MINIMAL)
    other = cfg.with_overrides(delivery_mode="poll", duration=5.0)
    assert other.delivery_mode == "poll" and other.duration == 5.0
    assert cfg.delivery_mode == "push" and cfg.duration == 10.0


def test_bad_toml_is_a_parse_error():
    with pytest.raises(ParseError):
        parse_scenario("[scenario\nname=")


def test_unknown_scenario_field_rejected():
    with pytest.raises(ParseError, match="unknown field"):
        parse_scenario('[scenario]\nspeed = 3\n')


def test_missing_required_link_field():
    text = MINIMAL.replace('length_km = 10.0\n', '')
    with pytest.raises(ParseError, match="length_km"):
        parse_scenario(text)


def test_endpoints_must_be_a_pair():
    text = MINIMAL.replace('endpoints = ["n1", "n2"]', 'endpoints = ["n1"]')
    with pytest.raises(ParseError, match="two-element"):
        parse_scenario(text)


@pytest.mark.parametrize("mutation, error, fragment", [
    ('duration = 10.0', ScenarioError, 'duration = 0.0'),
    ('seed = 42', ScenarioError, 'delivery_mode = "carrier-pigeon"\nseed = 1'),
    ('seed = 42', ScenarioError, 'fill_threshold = 1.5\nseed = 1'),
    ('seed = 42', ScenarioError, 'refresh_mode = "swap"\nseed = 1'),
    ('seed = 42', ScenarioError, 'poll_period = 0.0\nseed = 1'),
])
def test_scalar_validation(mutation, error, fragment):
    with pytest.raises(error):
        parse_scenario(MINIMAL.replace(mutation, fragment))


def test_dangling_link_endpoint():
    text = MINIMAL.replace('endpoints = ["n1", "n2"]', 'endpoints = ["n1", "ghost"]')
    with pytest.raises(DanglingReference, match="ghost"):
        parse_scenario(text)


def test_self_link_rejected():
    text = MINIMAL.replace('endpoints = ["n1", "n2"]', 'endpoints = ["n1", "n1"]')
    with pytest.raises(ScenarioError, match="differ"):
        parse_scenario(text)


def test_duplicate_ids_rejected():
    dup_node = MINIMAL.replace('kmm_id = "n2"', 'kmm_id = "n1"', 1)
    with pytest.raises(ScenarioError, match="duplicate kmm_id"):
        parse_scenario(dup_node)
    extra = ('\n[[link]]\nlink_id = "{lid}"\nendpoints = ["n2", "n1"]\n'
             'length_km = 1.0\nattenuation_db_per_km = 0.2\nbase_rate_bps = 10.0\n')
    with pytest.raises(ScenarioError, match="duplicate link_id"):
        parse_scenario(MINIMAL + extra.format(lid="l1"))
    # same endpoints under a new name is still one pair too many
    with pytest.raises(ScenarioError, match="more than one link"):
        parse_scenario(MINIMAL + extra.format(lid="l2"))


def test_negative_physics_rejected():
    text = MINIMAL.replace("length_km = 10.0", "length_km = -1.0")
    with pytest.raises(ScenarioError, match="negative"):
        parse_scenario(text)
    text = MINIMAL + 'block_size_bits = 100\n'
    with pytest.raises(ScenarioError, match="block_size_bits"):
        parse_scenario(text)


def test_switch_group_validation():
    base = MINIMAL + """
[[switch_group]]
bob = "n1"
alices = ["n2"]
slot_duration = 2.0
"""
    assert parse_scenario(base).switch_groups[0].alices == ["n2"]
    with pytest.raises(DanglingReference, match="unknown alice"):
        parse_scenario(base.replace('alices = ["n2"]', 'alices = ["nx"]'))
    with pytest.raises(ScenarioError, match="slot_duration"):
        parse_scenario(base.replace("slot_duration = 2.0", "slot_duration = 0"))
    with pytest.raises(ScenarioError, match="own alice"):
        parse_scenario(base.replace('alices = ["n2"]', 'alices = ["n1"]'))
    # a switched pair needs a link underneath
    no_link = base.replace('endpoints = ["n1", "n2"]', 'endpoints = ["n2", "n1"]')
    assert parse_scenario(no_link)  # order does not matter
    twice = base + '\n[[switch_group]]\nbob = "n2"\nalices = ["n1"]\nslot_duration = 1.0\n'
    with pytest.raises(ScenarioError, match="two switch groups"):
        parse_scenario(twice)


def test_sae_validation():
    base = MINIMAL + """
[[sae]]
sae_id = "app-1"
kmm = "n1"
peer_sae = "app-2"
data_rate_bps = 1000.0

[[sae]]
sae_id = "app-2"
kmm = "n2"
"""
    cfg = parse_scenario(base)
    assert cfg.saes[0].peer_sae == "app-2"
    assert cfg.saes[1].data_rate_bps == 0.0
    with pytest.raises(DanglingReference, match="unknown node"):
        parse_scenario(base.replace('kmm = "n1"', 'kmm = "nx"'))
    with pytest.raises(DanglingReference, match="unknown peer"):
        parse_scenario(base.replace('peer_sae = "app-2"', 'peer_sae = "app-9"'))
    with pytest.raises(ScenarioError, match="master entry only"):
        parse_scenario(base + 'peer_sae = "app-1"\n')
    with pytest.raises(ScenarioError, match="different nodes"):
        parse_scenario(base.replace('kmm = "n2"', 'kmm = "n1"'))
    with pytest.raises(ScenarioError, match="unknown qos"):
        parse_scenario(base + '\n[sae.qos]\ncolor = "blue"\n')


def test_event_validation():
    base = MINIMAL + """
[[event]]
time = 5.0
action = "link_down"
target = "l1"
"""
    assert parse_scenario(base).events[0].action == "link_down"
    with pytest.raises(DanglingReference, match="unknown link"):
        parse_scenario(base.replace('target = "l1"', 'target = "l9"'))
    with pytest.raises(ScenarioError, match="unknown event action"):
        parse_scenario(base.replace('action = "link_down"', 'action = "explode"'))
    with pytest.raises(ScenarioError, match="time"):
        parse_scenario(base.replace("time = 5.0", "time = -1.0"))
    kmm_event = base.replace('action = "link_down"', 'action = "kmm_offline"') \
                    .replace('target = "l1"', 'target = "n2"')
    assert parse_scenario(kmm_event).events[0].target == "n2"


def test_missing_file_is_a_parse_error(tmp_path):
    with pytest.raises(ParseError, match="cannot read"):
        load_scenario(tmp_path / "missing.toml")


# -- shipped scenario files ---------------------------------------------------


def test_shipped_two_node_metro_file():
    cfg = load_scenario(SCENARIOS / "telaviv.toml")
    assert cfg.duration == 60.0
    link = cfg.links[0]
    assert link.length_km == 15.0
    assert link.attenuation_db_per_km == 0.3
    assert link.base_rate_bps == 10000.0
    assert link.block_size_bits == 256
    assert len(cfg.saes) == 2
    masters = [s for s in cfg.saes if s.peer_sae]
    assert len(masters) == 1 and masters[0].data_rate_bps == 1_000_000.0


def test_shipped_switched_ring_file():
    cfg = load_scenario(SCENARIOS / "turin.toml")
    assert len(cfg.nodes) == 4
    assert len(cfg.links) == 5
    group = cfg.switch_groups[0]
    assert group.bob == "hub-a"
    assert sorted(group.alices) == ["site-b", "site-c", "site-d"]
    assert group.slot_duration == 5.0
    assert cfg.duration == 300.0


def test_shipped_delivery_bench_file():
    cfg = load_scenario(SCENARIOS / "pushpoll.toml")
    assert cfg.links[0].base_rate_bps == 97.0
    assert cfg.links[0].length_km == 0.0
    assert cfg.duration == 26600.0
    assert cfg.saes == []
