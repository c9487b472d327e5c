"""Logically centralized network controller.

Builds the topology graph from hello messages (union rule: an edge
exists once either endpoint reports it, confirmed once both have),
computes minimum-hop paths with deterministic lexicographic
tie-breaking, filters low-key-material edges out of QoS paths, distributes
path assignments to every node on the path, and reacts to link-down
events by recomputing the assignments that crossed the dead edge.
"""

from __future__ import annotations

import uuid
from dataclasses import dataclass, field
from typing import Optional

from .broker import Broker, unicast
from .errors import NoPath, UnknownNode
from .kmm import PathAssignment

NIL_KSID = uuid.UUID(int=0)


@dataclass
class EdgeRecord:
    a: str
    b: str
    state: str = "up"
    link_id: Optional[str] = None
    reported_by: set = field(default_factory=set)
    # reporter kmm_id -> (fill_fraction, report time)
    fill_reports: dict = field(default_factory=dict)
    last_status_time: float = 0.0

    @property
    def confirmed(self) -> bool:
        return len(self.reported_by) >= 2

    def fill(self, now: float, status_interval: float) -> Optional[float]:
        """Min of fresh endpoint reports; None (unknown) when all are stale."""
        horizon = 3.0 * status_interval
        fresh = [f for f, t in self.fill_reports.values() if now - t <= horizon]
        return min(fresh) if fresh else None


class Controller:
    SERVICE = "controller"

    def __init__(
        self,
        broker: Broker,
        token: str = "controller-token",
        fill_threshold: float = 0.2,
        status_interval: float = 5.0,
        event_log=None,
    ) -> None:
        self.broker = broker
        self.token = token
        broker.register_service(self.SERVICE, token)
        for topic in ("hello", "key-status", "link-status"):
            broker.subscribe(self.SERVICE, token, topic)
        self.fill_threshold = fill_threshold
        self.status_interval = status_interval
        self.event_log = event_log
        self.nodes: set[str] = set()
        self.edges: dict[frozenset, EdgeRecord] = {}
        self.link_edge: dict[str, frozenset] = {}
        self.assignments: dict[uuid.UUID, PathAssignment] = {}
        self.session_src: dict[uuid.UUID, str] = {}
        self.relay_failures = 0

    # -- topology ------------------------------------------------------------

    def handle_hello(self, msg: dict, now: float = 0.0) -> None:
        """Upsert the sender and its edges; idempotent."""
        kmm_id = msg["kmm_id"]
        self.nodes.add(kmm_id)
        links = msg.get("links", {})
        for neighbor in msg["neighbor_ids"]:
            if neighbor == kmm_id:
                continue
            self.nodes.add(neighbor)
            pair = frozenset({kmm_id, neighbor})
            edge = self.edges.get(pair)
            if edge is None:
                a, b = sorted(pair)
                edge = EdgeRecord(a, b)
                self.edges[pair] = edge
            edge.reported_by.add(kmm_id)
            link_id = links.get(neighbor)
            if link_id:
                edge.link_id = link_id
                self.link_edge[link_id] = pair

    def handle_link_status(self, event: dict, now: float = 0.0) -> None:
        """Update edge state; recompute assignments crossing a down edge."""
        pair = self.link_edge.get(event["link_id"])
        if pair is None:
            return  # link not discovered yet; nothing to update
        edge = self.edges[pair]
        if edge.state == event["new_state"]:
            return
        edge.state = event["new_state"]
        edge.last_status_time = event.get("timestamp", now)
        if edge.state == "down":
            self._recompute_over(pair, now)

    def _recompute_over(self, dead_pair: frozenset, now: float) -> None:
        for ksid, assignment in list(self.assignments.items()):
            hops = list(zip(assignment.nodes, assignment.nodes[1:]))
            if not any(frozenset(h) == dead_pair for h in hops):
                continue
            src, dst = assignment.nodes[0], assignment.nodes[-1]
            try:
                new = self.compute_path_qos(src, dst, self.fill_threshold, ksid, now)
            except (NoPath, UnknownNode):
                del self.assignments[ksid]
                self._send(src, "no_path", {"ksid": str(ksid), "reason": "link_down"})
                continue
            self.assignments[ksid] = new
            self.distribute_path(new)

    def handle_key_status(self, status: dict, now: float = 0.0) -> None:
        reporter = status["kmm_id"]
        at = status.get("at", now)
        for row in status["peers"]:
            pair = frozenset({reporter, row["peer_id"]})
            edge = self.edges.get(pair)
            if edge is None:
                continue  # pool toward a non-adjacent node (relay stock)
            if row.get("fill_fraction") is not None:
                edge.fill_reports[reporter] = (row["fill_fraction"], at)
            if row.get("link_id") and edge.link_id is None:
                edge.link_id = row["link_id"]
                self.link_edge[row["link_id"]] = pair

    # -- routing ---------------------------------------------------------------

    def _adjacency(self, allowed) -> dict[str, list[str]]:
        adj: dict[str, list[str]] = {n: [] for n in self.nodes}
        for pair, edge in self.edges.items():
            if not allowed(edge):
                continue
            a, b = edge.a, edge.b
            adj[a].append(b)
            adj[b].append(a)
        return adj

    @staticmethod
    def _shortest_lex_path(adj: dict[str, list[str]], src: str, dst: str) -> Optional[list]:
        """Lexicographically smallest among minimum-hop src->dst paths.

        BFS from dst gives each node its distance to dst; walking from src
        and always taking the smallest neighbor one step closer yields the
        lexicographic minimum, since every such neighbor lies on some
        shortest path.
        """
        dist = {dst: 0}
        frontier = [dst]
        while frontier:
            nxt = []
            for u in frontier:
                for v in adj[u]:
                    if v not in dist:
                        dist[v] = dist[u] + 1
                        nxt.append(v)
            frontier = nxt
        if src not in dist:
            return None
        path = [src]
        u = src
        while u != dst:
            u = min(v for v in adj[u] if dist.get(v) == dist[u] - 1)
            path.append(u)
        return path

    def _check_pair(self, src: str, dst: str) -> None:
        if src == dst:
            raise ValueError("src and dst must differ")
        if src not in self.nodes:
            raise UnknownNode(src)
        if dst not in self.nodes:
            raise UnknownNode(dst)

    def compute_path(self, src: str, dst: str, ksid: uuid.UUID = NIL_KSID,
                     now: float = 0.0) -> PathAssignment:
        """Minimum-hop path over up edges; lexicographic tie-break."""
        self._check_pair(src, dst)
        adj = self._adjacency(lambda e: e.state == "up")
        nodes = self._shortest_lex_path(adj, src, dst)
        if nodes is None:
            raise NoPath(f"{src} -> {dst}")
        return PathAssignment(ksid, nodes, now)

    def compute_path_qos(self, src: str, dst: str, fill_threshold: Optional[float] = None,
                         ksid: uuid.UUID = NIL_KSID, now: float = 0.0) -> PathAssignment:
        """Like compute_path but avoiding edges low on key material.

        Unknown fill passes the filter; only bilaterally confirmed edges
        qualify.  Falls back to the plain path, flagged degraded, when
        the filtered graph has no route.
        """
        self._check_pair(src, dst)
        threshold = self.fill_threshold if fill_threshold is None else fill_threshold
        if not 0.0 <= threshold <= 1.0:
            raise ValueError("fill_threshold must be within [0, 1]")

        def allowed(e: EdgeRecord) -> bool:
            if e.state != "up" or not e.confirmed:
                return False
            fill = e.fill(now, self.status_interval)
            return fill is None or fill >= threshold

        nodes = self._shortest_lex_path(self._adjacency(allowed), src, dst)
        if nodes is not None:
            return PathAssignment(ksid, nodes, now)
        fallback = self.compute_path(src, dst, ksid, now)
        fallback.degraded = True
        return fallback

    def distribute_path(self, assignment: PathAssignment) -> int:
        """Unicast the assignment to every node on the path."""
        payload = assignment.to_payload()
        for node in assignment.nodes:
            self._send(node, "path_assign", payload)
        if assignment.ksid != NIL_KSID:
            self.assignments[assignment.ksid] = assignment
        return len(assignment.nodes)

    # -- broker plumbing ---------------------------------------------------------

    def _send(self, destination: str, payload_kind: str, payload: dict) -> None:
        if not self.broker.is_registered(destination):
            return
        self.broker.publish(
            unicast(self.SERVICE, destination, payload_kind, payload), self.token
        )

    def handle_envelope(self, env, now: float) -> None:
        kind = env.payload_kind
        if kind == "hello":
            self.handle_hello(env.payload, now)
        elif kind == "link_status":
            self.handle_link_status(env.payload, now)
        elif kind == "key_status":
            self.handle_key_status(env.payload, now)
        elif kind == "path_request":
            self._handle_path_request(env.payload, now)
        elif kind == "relay_fail":
            self.relay_failures += 1

    def _handle_path_request(self, payload: dict, now: float) -> None:
        ksid = uuid.UUID(payload["ksid"])
        src, dst = payload["src"], payload["dst"]
        self.session_src[ksid] = src
        try:
            assignment = self.compute_path_qos(src, dst, None, ksid, now)
        except (NoPath, UnknownNode):
            self._send(src, "no_path", {"ksid": str(ksid), "reason": "no_path"})
            return
        self.distribute_path(assignment)

    # -- introspection -------------------------------------------------------------

    def topology_snapshot(self, now: float = 0.0) -> dict:
        edges = []
        for pair in sorted(self.edges, key=lambda p: tuple(sorted(p))):
            e = self.edges[pair]
            edges.append({
                "a": e.a,
                "b": e.b,
                "state": e.state,
                "confirmed": e.confirmed,
                "link_id": e.link_id,
                "fill_fraction": e.fill(now, self.status_interval),
                "last_status_time": e.last_status_time,
            })
        return {"nodes": sorted(self.nodes), "edges": edges}
