"""Scenario harness: component wiring plus the virtual-time event loop.

One Simulation owns the whole stack for a scenario: broker, link sims,
key managers, controller, and application pairs, all driven from a
single event queue so a run is a pure function of (scenario, seed).
Broker hand-off is modeled as one event cycle: an envelope published at
t is drained by its destination at t + DELIVERY_CYCLE.
"""

from __future__ import annotations

import hashlib
import warnings
from typing import Optional

from .broker import Broker
from .clock import Event, EventQueue, VirtualClock
from .controller import Controller
from .errors import StoreFull
from .eventlog import EventLog, replay_totals
from .kmm import Kmm, QosSpec
from .qlink import (
    LOSS_BUDGET_DB,
    LinkLayer,
    QuantumLink,
    SwitchGroup,
    active_alice_at,
    effective_rate,
)
from .sae import SaeEndpoint, SaePair
from .scenario import LINK_ACTIONS, EventCfg, ScenarioConfig

DELIVERY_CYCLE = 0.001


def derive_seed(base: int, *tags) -> int:
    """Stable per-component seed from the run seed plus name tags."""
    text = ":".join([str(base), *[str(t) for t in tags]])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


class Simulation:
    """Deterministic run of one scenario.

    Usage: Simulation(config).run() -> report dict, or start() plus
    advance_to(t) for stepwise driving (the serve mode does this).
    """

    def __init__(self, config: ScenarioConfig, seed: Optional[int] = None) -> None:
        self.config = config
        self.seed = config.seed if seed is None else seed
        self.clock = VirtualClock(0.0)
        self.queue = EventQueue(self.clock)
        self.log = EventLog()
        self.broker = Broker(
            time_source=lambda: self.clock.now, max_queue=config.broker_max_queue
        )
        self.broker.on_enqueue = self._on_enqueue
        self.controller = Controller(
            self.broker,
            fill_threshold=config.fill_threshold,
            status_interval=config.status_interval,
            event_log=self.log,
        )
        self.link_layer = LinkLayer(self.broker)

        self.kmms: dict[str, Kmm] = {}
        for node in config.nodes:
            self.kmms[node.kmm_id] = Kmm(
                node.kmm_id,
                self.broker,
                capacity_bits=node.store_capacity_bits,
                default_ttl=config.default_ttl,
                retry_budget=config.retry_budget,
                relay_stock=config.relay_stock,
                rng_seed=derive_seed(self.seed, "kmm", node.kmm_id),
                event_log=self.log,
            )

        for lc in config.links:
            link = QuantumLink(
                link_id=lc.link_id,
                endpoint_a=lc.endpoint_a,
                endpoint_b=lc.endpoint_b,
                length_km=lc.length_km,
                attenuation_db_per_km=lc.attenuation_db_per_km,
                base_rate_bps=lc.base_rate_bps,
                block_size_bits=lc.block_size_bits,
                state=lc.initial_state,
                rng_seed=derive_seed(self.seed, "link", lc.link_id),
            )
            self.link_layer.add_link(link)
            # Admission works against the nominal (up-state) rate.
            loss = lc.length_km * lc.attenuation_db_per_km
            nominal = (
                lc.base_rate_bps * 10.0 ** (-loss / 10.0)
                if loss < LOSS_BUDGET_DB
                else 0.0
            )
            self.kmms[lc.endpoint_a].wire_link(lc.endpoint_b, lc.link_id, nominal)
            self.kmms[lc.endpoint_b].wire_link(lc.endpoint_a, lc.link_id, nominal)

        self._groups = []
        for sw in config.switch_groups:
            group = SwitchGroup(sw.bob, list(sw.alices), sw.slot_duration)
            self.link_layer.add_switch_group(group)
            members = []
            for alice in sw.alices:
                sim = self.link_layer.link_for_pair(sw.bob, alice)
                members.append((alice, sim))
            self._groups.append((group, members))

        sae_home = {s.sae_id: s.kmm for s in config.saes}
        for kmm in self.kmms.values():
            kmm.directory.update(sae_home)
        for s in config.saes:
            self.kmms[s.kmm].local_saes.add(s.sae_id)

        self._clients: dict[str, object] = {}
        self.pairs: list[SaePair] = []
        by_id = {s.sae_id: s for s in config.saes}
        for s in config.saes:
            if not s.peer_sae:
                continue
            peer = by_id[s.peer_sae]
            pair = SaePair(
                master=SaeEndpoint(s.sae_id, s.kmm, "master"),
                slave=SaeEndpoint(peer.sae_id, peer.kmm, "slave"),
                qos=QosSpec(**s.qos) if s.qos else QosSpec(),
                data_rate_bps=s.data_rate_bps,
                broker=self.broker,
                master_kmm=self.kmms[s.kmm],
                slave_kmm=self.kmms[peer.kmm],
                master_http=self._http(s.kmm),
                slave_http=self._http(peer.kmm),
                refresh_mode=config.refresh_mode,
                event_log=self.log,
            )
            self.pairs.append(pair)

        self.tokens: dict[str, str] = {Controller.SERVICE: self.controller.token}
        self.handlers: dict[str, object] = {Controller.SERVICE: self.controller}
        for kmm_id, kmm in self.kmms.items():
            self.tokens[kmm_id] = kmm.token
            self.handlers[kmm_id] = kmm
        for pair in self.pairs:
            for ep in (pair.master, pair.slave):
                self.tokens[ep.sae_id] = pair.token
                self.handlers[ep.sae_id] = pair

        self._wake_pending: set[str] = set()
        self._emission_events: dict[str, Event] = {}
        self._started = False

    def _http(self, kmm_id: str):
        client = self._clients.get(kmm_id)
        if client is None:
            # the embedded client rides the ASGI app in-process; its
            # import warns about a transport detail that no external
            # request here can hit
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                from fastapi.testclient import TestClient

            from .service.kmm_api import make_kmm_app

            app = make_kmm_app(self.kmms[kmm_id], now_fn=lambda: self.clock.now)
            client = TestClient(app)
            self._clients[kmm_id] = client
        return client

    # -- broker hand-off -----------------------------------------------------

    def _on_enqueue(self, service: str) -> None:
        self._wake(service)

    def _wake(self, service: str) -> None:
        # One pending drain per service; it empties the whole queue, so
        # envelopes that arrive while it is pending ride along.
        if service in self._wake_pending or service not in self.handlers:
            return
        if not self.broker.is_online(service):
            return
        self._wake_pending.add(service)
        self.queue.schedule_after(
            DELIVERY_CYCLE, lambda: self._drain(service), f"drain:{service}"
        )

    def _drain(self, service: str) -> None:
        self._wake_pending.discard(service)
        if not self.broker.is_online(service):
            return  # went offline meanwhile; queue survives for reconnect
        envelopes = self.broker.drain(service, self.tokens[service])
        handler = self.handlers[service]
        for env in envelopes:
            handler.handle_envelope(env, self.clock.now)

    # -- periodic machinery ----------------------------------------------------

    def _schedule_emission(self, link_id: str) -> None:
        old = self._emission_events.pop(link_id, None)
        if old is not None:
            old.cancel()
        sim = self.link_layer.links[link_id]
        t = sim.next_crossing()
        if t is None:
            return
        t = max(t, self.clock.now)
        if t > self.config.duration:
            return
        self._emission_events[link_id] = self.queue.schedule(
            t, lambda: self._emit(link_id), f"emit:{link_id}"
        )

    def _emit(self, link_id: str) -> None:
        self._emission_events.pop(link_id, None)
        sim = self.link_layer.links[link_id]
        now = self.clock.now
        for block in sim.harvest(now):
            self.log.emit(
                now,
                "block_generated",
                link_id=link_id,
                key_id=str(block.key_id),
                size_bits=sim.link.block_size_bits,
            )
            if self.config.delivery_mode == "push":
                self.link_layer.deliver_push(block)
        self._schedule_emission(link_id)

    def _switch_tick(self, group: SwitchGroup, members) -> None:
        now = self.clock.now
        # Settle the ending slot under the old activity flags first.
        for _, sim in members:
            sim.accrue_to(now)
        active = active_alice_at(group, now)
        for alice, sim in members:
            sim.active = alice == active
        for _, sim in members:
            self._schedule_emission(sim.link.link_id)
        nxt = now + group.slot_duration
        if nxt <= self.config.duration:
            self.queue.schedule(
                nxt,
                lambda: self._switch_tick(group, members),
                f"switch:{group.bob}",
            )

    def _status_tick(self) -> None:
        now = self.clock.now
        for kmm_id in sorted(self.kmms):
            kmm = self.kmms[kmm_id]
            kmm.sweep(now)
            if self.broker.is_online(kmm_id):
                kmm.report_status(now)
        nxt = now + self.config.status_interval
        if nxt <= self.config.duration:
            self.queue.schedule(nxt, self._status_tick, "status")

    def _poll_tick(self) -> None:
        now = self.clock.now
        for link_id in sorted(self.link_layer.links):
            sim = self.link_layer.links[link_id]
            for endpoint in sorted(sim.link.endpoints):
                if not self.broker.is_online(endpoint):
                    continue
                blocks = self.link_layer.poll_keys(link_id, endpoint, max_count=10**9)
                kmm = self.kmms[endpoint]
                for block in blocks:
                    try:
                        kmm.store_key(block, now)
                    except StoreFull:
                        pass  # counted by the store owner
        nxt = now + self.config.poll_period
        if nxt <= self.config.duration:
            self.queue.schedule(nxt, self._poll_tick, "poll")

    def _start_pair(self, pair: SaePair) -> None:
        now = self.clock.now
        try:
            pair.start(now)
        except Exception as exc:
            self.log.emit(
                now,
                "session_rejected",
                master_sae=pair.master.sae_id,
                slave_sae=pair.slave.sae_id,
                reason=type(exc).__name__,
            )
            return
        self._sae_tick(pair)

    def _sae_tick(self, pair: SaePair) -> None:
        delay = pair.tick(self.clock.now)
        nxt = self.clock.now + delay
        if nxt <= self.config.duration:
            self.queue.schedule(
                nxt, lambda: self._sae_tick(pair), f"sae:{pair.master.sae_id}"
            )

    def _scripted(self, ev: EventCfg) -> None:
        now = self.clock.now
        self.log.emit(now, "scripted_event", action=ev.action, target=ev.target)
        if ev.action in LINK_ACTIONS:
            self.link_layer.set_state(ev.target, LINK_ACTIONS[ev.action], now,
                                      detail="scripted")
            self._schedule_emission(ev.target)
        elif ev.action == "kmm_offline":
            self.broker.set_offline(ev.target)
        elif ev.action == "kmm_online":
            self.broker.register_service(ev.target, self.tokens[ev.target])
            if self.broker.queue_depth(ev.target) > 0:
                self._wake(ev.target)

    # -- lifecycle -------------------------------------------------------------

    def _bootstrap(self) -> None:
        now = self.clock.now
        cfg = self.config
        for group, members in self._groups:
            active = active_alice_at(group, now)
            for alice, sim in members:
                sim.active = alice == active
        for kmm_id in sorted(self.kmms):
            self.kmms[kmm_id].send_hello(now)
        for link_id in sorted(self.link_layer.links):
            if self.link_layer.links[link_id].link.state != "up":
                self.link_layer.announce_state(link_id, now, detail="initial")
        for link_id in sorted(self.link_layer.links):
            self._schedule_emission(link_id)
        for group, members in self._groups:
            if group.slot_duration <= cfg.duration:
                self.queue.schedule(
                    group.slot_duration,
                    (lambda g=group, m=members: self._switch_tick(g, m)),
                    f"switch:{group.bob}",
                )
        if cfg.status_interval <= cfg.duration:
            self.queue.schedule(cfg.status_interval, self._status_tick, "status")
        if cfg.delivery_mode == "poll" and cfg.poll_period <= cfg.duration:
            self.queue.schedule(cfg.poll_period, self._poll_tick, "poll")
        for pair in self.pairs:
            self.queue.schedule(
                min(cfg.establish_delay, cfg.duration),
                (lambda p=pair: self._start_pair(p)),
                f"sae:{pair.master.sae_id}",
            )
        for ev in cfg.events:
            if ev.time <= cfg.duration:
                self.queue.schedule(
                    ev.time, (lambda e=ev: self._scripted(e)), f"event:{ev.action}"
                )

    def start(self) -> None:
        if not self._started:
            self._started = True
            self._bootstrap()

    def advance_to(self, t: float) -> None:
        self.start()
        target = min(t, self.config.duration)
        if target < self.clock.now:
            raise ValueError(f"cannot rewind to {target} from {self.clock.now}")
        self.queue.run_until(target)

    def run(self) -> dict:
        self.advance_to(self.config.duration)
        return self.build_report()

    # -- reporting ---------------------------------------------------------------

    def build_report(self) -> dict:
        now = self.clock.now
        gen_at = {}
        for rec in self.log.of_kind("block_generated"):
            gen_at[rec["key_id"]] = rec["t"]
        latencies = []
        for rec in self.log.of_kind("key_stored"):
            t0 = gen_at.get(rec.get("key_id"))
            if t0 is not None:
                latencies.append(rec["t"] - t0)

        links = {}
        for link_id in sorted(self.link_layer.links):
            sim = self.link_layer.links[link_id]
            links[link_id] = {
                "state": sim.link.state,
                "effective_rate_bps": effective_rate(sim.link),
                "generated_blocks": sim.generated_blocks,
                "generated_bits": sim.generated_bits,
                "undelivered_blocks": {
                    ep: sim.pending_count(ep) for ep in sorted(sim.link.endpoints)
                },
            }

        kmms = {}
        for kmm_id in sorted(self.kmms):
            kmm = self.kmms[kmm_id]
            entry = kmm.stats()
            entry["stores"] = {
                peer: {
                    "stored_bits": kmm.store.stored_bits(peer),
                    "available_bits": kmm.store.available_bits(
                        peer, now, allocatable_only=False
                    ),
                }
                for peer in sorted(kmm.store.peers())
            }
            kmms[kmm_id] = entry

        sessions = {}
        for kmm_id in sorted(self.kmms):
            for ksid in sorted(self.kmms[kmm_id].sessions, key=str):
                s = self.kmms[kmm_id].sessions[ksid]
                path = list(s.path.nodes) if s.path else [kmm_id, s.peer_kmm]
                sessions[str(ksid)] = {
                    "source": kmm_id,
                    "master_sae": s.master_sae,
                    "slave_sae": s.slave_sae,
                    "status": s.status,
                    "close_reason": s.close_reason,
                    "path": path,
                    "trusted_node_count": max(len(path) - 2, 0),
                    "degraded": bool(s.path.degraded) if s.path else False,
                }

        relays = {
            "initiated": sum(k.relays_initiated for k in self.kmms.values()),
            "forwarded": sum(k.relays_forwarded for k in self.kmms.values()),
            "delivered": sum(k.relays_delivered for k in self.kmms.values()),
            "failed": sum(k.relays_failed for k in self.kmms.values()),
        }

        southbound = {
            "delivery_mode": self.config.delivery_mode,
            "push_messages": self.link_layer.southbound_push_messages,
            "poll_messages": self.link_layer.southbound_poll_messages,
            "blocks_generated": sum(
                s.generated_blocks for s in self.link_layer.links.values()
            ),
            "stored_events": len(latencies),
            "mean_store_latency_s": (
                sum(latencies) / len(latencies) if latencies else 0.0
            ),
            "max_store_latency_s": max(latencies) if latencies else 0.0,
        }

        diffs = self._reconcile(links, kmms, relays)
        return {
            "scenario": self.config.name,
            "seed": self.seed,
            "duration": self.config.duration,
            "virtual_time": now,
            "events_processed": self.queue.processed,
            "links": links,
            "kmms": kmms,
            "sessions": sessions,
            "channels": [p.metrics() for p in self.pairs],
            "relays": relays,
            "southbound": southbound,
            "broker": {
                "published": self.broker.published,
                "enqueued": self.broker.enqueued,
            },
            "reconciliation_ok": not diffs,
            "reconciliation_diffs": diffs,
        }

    def _reconcile(self, links: dict, kmms: dict, relays: dict) -> list[str]:
        """Recount totals from the raw event log; report any disagreement."""
        totals = replay_totals(self.log.records)
        diffs = []
        for link_id, row in links.items():
            logged = totals["links"].get(link_id, {}).get("generated_blocks", 0)
            if logged != row["generated_blocks"]:
                diffs.append(
                    f"link {link_id}: log says {logged} blocks, "
                    f"counter says {row['generated_blocks']}"
                )
        for kmm_id, row in kmms.items():
            logged = totals["kmms"].get(
                kmm_id,
                {"keys_stored": 0, "keys_served": 0, "keys_expired": 0,
                 "keys_rejected": 0},
            )
            for field in ("keys_stored", "keys_served", "keys_expired", "keys_rejected"):
                if logged[field] != row[field]:
                    diffs.append(
                        f"kmm {kmm_id}: log says {field}={logged[field]}, "
                        f"counter says {row[field]}"
                    )
        if totals["relays_completed"] != relays["delivered"]:
            diffs.append(
                f"relays: log says {totals['relays_completed']} delivered, "
                f"counters say {relays['delivered']}"
            )
        refreshes = sum(p.refresh_count for p in self.pairs)
        if totals["channel_refreshes"] != refreshes:
            diffs.append(
                f"channels: log says {totals['channel_refreshes']} refreshes, "
                f"counters say {refreshes}"
            )
        return diffs


def compare_delivery_modes(
    config: ScenarioConfig, poll_period: float = 1.0, seed: Optional[int] = None
) -> dict:
    """Run the scenario twice, once pushed and once polled, same seed."""
    out = {
        "scenario": config.name,
        "poll_period": poll_period,
        "modes": {},
    }
    variants = (
        ("push", config.with_overrides(delivery_mode="push")),
        ("poll", config.with_overrides(delivery_mode="poll", poll_period=poll_period)),
    )
    for mode, cfg in variants:
        report = Simulation(cfg, seed).run()
        south = report["southbound"]
        out["modes"][mode] = {
            "blocks_generated": south["blocks_generated"],
            "stored_events": south["stored_events"],
            "messages": (
                south["push_messages"] if mode == "push" else south["poll_messages"]
            ),
            "mean_store_latency_s": south["mean_store_latency_s"],
            "max_store_latency_s": south["max_store_latency_s"],
        }
    return out
