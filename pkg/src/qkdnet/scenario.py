"""Scenario files: declarative description of one simulated network.

TOML with one [scenario] table plus [[node]], [[link]], [[switch_group]],
[[sae]] and [[event]] arrays.  Loading validates every cross-reference
(link endpoints, switch members, application peers, event targets) so a
bad file fails before any simulation starts.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .errors import DanglingReference, ParseError, ScenarioError

LINK_ACTIONS = {"link_down": "down", "link_up": "up", "link_degraded": "degraded"}
KMM_ACTIONS = {"kmm_offline", "kmm_online"}


@dataclass
class NodeCfg:
    kmm_id: str
    store_capacity_bits: Optional[int] = None


@dataclass
class LinkCfg:
    link_id: str
    endpoint_a: str
    endpoint_b: str
    length_km: float
    attenuation_db_per_km: float
    base_rate_bps: float
    block_size_bits: int = 256
    initial_state: str = "up"


@dataclass
class SwitchCfg:
    bob: str
    alices: list[str]
    slot_duration: float


@dataclass
class SaeCfg:
    sae_id: str
    kmm: str
    peer_sae: Optional[str] = None
    data_rate_bps: float = 0.0
    qos: dict = field(default_factory=dict)


@dataclass
class EventCfg:
    time: float
    action: str
    target: str


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    duration: float = 60.0
    seed: int = 1
    delivery_mode: str = "push"
    poll_period: float = 1.0
    status_interval: float = 5.0
    fill_threshold: float = 0.2
    default_ttl: float = 3600.0
    retry_budget: int = 3
    relay_stock: int = 4
    refresh_mode: str = "fresh"
    establish_delay: float = 0.05
    broker_max_queue: Optional[int] = None
    nodes: list[NodeCfg] = field(default_factory=list)
    links: list[LinkCfg] = field(default_factory=list)
    switch_groups: list[SwitchCfg] = field(default_factory=list)
    saes: list[SaeCfg] = field(default_factory=list)
    events: list[EventCfg] = field(default_factory=list)

    def with_overrides(self, **kw) -> "ScenarioConfig":
        return replace(self, **kw)


def _require(table: dict, key: str, where: str):
    if key not in table:
        raise ParseError(f"{where}: missing required field {key!r}")
    return table[key]


def _build(data: dict, name: str) -> ScenarioConfig:
    cfg = ScenarioConfig(name=name)
    meta = data.get("scenario", {})
    scalar_fields = {
        "name": str, "duration": float, "seed": int, "delivery_mode": str,
        "poll_period": float, "status_interval": float, "fill_threshold": float,
        "default_ttl": float, "retry_budget": int, "relay_stock": int,
        "refresh_mode": str, "establish_delay": float, "broker_max_queue": int,
    }
    for key, value in meta.items():
        if key not in scalar_fields:
            raise ParseError(f"[scenario]: unknown field {key!r}")
        try:
            setattr(cfg, key, scalar_fields[key](value))
        except (TypeError, ValueError) as exc:
            raise ParseError(f"[scenario].{key}: {exc}") from exc

    for i, t in enumerate(data.get("node", [])):
        where = f"[[node]] #{i + 1}"
        cfg.nodes.append(NodeCfg(
            kmm_id=str(_require(t, "kmm_id", where)),
            store_capacity_bits=t.get("store_capacity_bits"),
        ))
    for i, t in enumerate(data.get("link", [])):
        where = f"[[link]] #{i + 1}"
        endpoints = _require(t, "endpoints", where)
        if not isinstance(endpoints, list) or len(endpoints) != 2:
            raise ParseError(f"{where}: endpoints must be a two-element list")
        cfg.links.append(LinkCfg(
            link_id=str(_require(t, "link_id", where)),
            endpoint_a=str(endpoints[0]),
            endpoint_b=str(endpoints[1]),
            length_km=float(_require(t, "length_km", where)),
            attenuation_db_per_km=float(_require(t, "attenuation_db_per_km", where)),
            base_rate_bps=float(_require(t, "base_rate_bps", where)),
            block_size_bits=int(t.get("block_size_bits", 256)),
            initial_state=str(t.get("initial_state", "up")),
        ))
    for i, t in enumerate(data.get("switch_group", [])):
        where = f"[[switch_group]] #{i + 1}"
        cfg.switch_groups.append(SwitchCfg(
            bob=str(_require(t, "bob", where)),
            alices=[str(a) for a in _require(t, "alices", where)],
            slot_duration=float(_require(t, "slot_duration", where)),
        ))
    for i, t in enumerate(data.get("sae", [])):
        where = f"[[sae]] #{i + 1}"
        cfg.saes.append(SaeCfg(
            sae_id=str(_require(t, "sae_id", where)),
            kmm=str(_require(t, "kmm", where)),
            peer_sae=t.get("peer_sae"),
            data_rate_bps=float(t.get("data_rate_bps", 0.0)),
            qos=dict(t.get("qos", {})),
        ))
    for i, t in enumerate(data.get("event", [])):
        where = f"[[event]] #{i + 1}"
        cfg.events.append(EventCfg(
            time=float(_require(t, "time", where)),
            action=str(_require(t, "action", where)),
            target=str(_require(t, "target", where)),
        ))
    return cfg


def _validate(cfg: ScenarioConfig) -> None:
    if cfg.duration <= 0:
        raise ScenarioError("duration must be > 0")
    if cfg.delivery_mode not in ("push", "poll"):
        raise ScenarioError(f"delivery_mode must be push or poll, got {cfg.delivery_mode!r}")
    if cfg.refresh_mode not in ("fresh", "replace"):
        raise ScenarioError(f"refresh_mode must be fresh or replace, got {cfg.refresh_mode!r}")
    if cfg.poll_period <= 0 or cfg.status_interval <= 0:
        raise ScenarioError("poll_period and status_interval must be > 0")
    if not 0.0 <= cfg.fill_threshold <= 1.0:
        raise ScenarioError("fill_threshold must be within [0, 1]")

    node_ids = [n.kmm_id for n in cfg.nodes]
    if len(set(node_ids)) != len(node_ids):
        raise ScenarioError("duplicate kmm_id among nodes")
    nodes = set(node_ids)

    link_ids = set()
    pairs = set()
    for link in cfg.links:
        if link.link_id in link_ids:
            raise ScenarioError(f"duplicate link_id {link.link_id!r}")
        link_ids.add(link.link_id)
        for ep in (link.endpoint_a, link.endpoint_b):
            if ep not in nodes:
                raise DanglingReference(
                    f"link {link.link_id!r} references unknown node {ep!r}"
                )
        if link.endpoint_a == link.endpoint_b:
            raise ScenarioError(f"link {link.link_id!r} endpoints must differ")
        pair = frozenset({link.endpoint_a, link.endpoint_b})
        if pair in pairs:
            raise ScenarioError(f"more than one link between {sorted(pair)}")
        pairs.add(pair)
        if link.initial_state not in ("up", "down", "degraded"):
            raise ScenarioError(f"link {link.link_id!r}: bad initial_state")
        if link.length_km < 0 or link.attenuation_db_per_km < 0 or link.base_rate_bps < 0:
            raise ScenarioError(f"link {link.link_id!r}: negative physical parameter")
        if link.block_size_bits <= 0 or link.block_size_bits % 8:
            raise ScenarioError(f"link {link.link_id!r}: block_size_bits must be a "
                                "positive multiple of 8")

    switched_pairs = set()
    for group in cfg.switch_groups:
        if group.bob not in nodes:
            raise DanglingReference(f"switch group references unknown bob {group.bob!r}")
        if not group.alices:
            raise ScenarioError("switch group needs at least one alice")
        if group.slot_duration <= 0:
            raise ScenarioError("switch group slot_duration must be > 0")
        for alice in group.alices:
            if alice not in nodes:
                raise DanglingReference(f"switch group references unknown alice {alice!r}")
            if alice == group.bob:
                raise ScenarioError("bob cannot be its own alice")
            pair = frozenset({group.bob, alice})
            if pair not in pairs:
                raise DanglingReference(
                    f"switch group needs a link between {group.bob!r} and {alice!r}"
                )
            if pair in switched_pairs:
                raise ScenarioError(f"link between {sorted(pair)} is in two switch groups")
            switched_pairs.add(pair)

    sae_ids = [s.sae_id for s in cfg.saes]
    if len(set(sae_ids)) != len(sae_ids):
        raise ScenarioError("duplicate sae_id")
    by_id = {s.sae_id: s for s in cfg.saes}
    for sae in cfg.saes:
        if sae.kmm not in nodes:
            raise DanglingReference(f"sae {sae.sae_id!r} references unknown node {sae.kmm!r}")
        bad = {k for k in sae.qos} - {
            "key_chunk_size_bits", "min_rate_bps", "ttl_override", "priority"
        }
        if bad:
            raise ScenarioError(f"sae {sae.sae_id!r}: unknown qos fields {sorted(bad)}")
        if sae.peer_sae is None:
            continue
        peer = by_id.get(sae.peer_sae)
        if peer is None:
            raise DanglingReference(
                f"sae {sae.sae_id!r} references unknown peer {sae.peer_sae!r}"
            )
        if peer.peer_sae is not None:
            raise ScenarioError(
                f"peer_sae must be set on the master entry only "
                f"({sae.sae_id!r} and {peer.sae_id!r} reference each other)"
            )
        if peer.kmm == sae.kmm:
            raise ScenarioError(
                f"sae pair {sae.sae_id!r}/{peer.sae_id!r} must be served by different nodes"
            )

    for ev in cfg.events:
        if ev.time < 0:
            raise ScenarioError("event time must be >= 0")
        if ev.action in LINK_ACTIONS:
            if ev.target not in link_ids:
                raise DanglingReference(f"event targets unknown link {ev.target!r}")
        elif ev.action in KMM_ACTIONS:
            if ev.target not in nodes:
                raise DanglingReference(f"event targets unknown node {ev.target!r}")
        else:
            raise ScenarioError(f"unknown event action {ev.action!r}")


def parse_scenario(text: str, name: str = "inline") -> ScenarioConfig:
    """Parse and validate scenario TOML from a string."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"{name}: {exc}") from exc
    cfg = _build(data, name)
    _validate(cfg)
    return cfg


def load_scenario(path) -> ScenarioConfig:
    """Parse and validate a scenario file."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read scenario {path}: {exc}") from exc
    return parse_scenario(text, name=p.stem)
