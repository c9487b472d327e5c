"""Simulated secure applications (cipher pairs).

A pair of application endpoints establishes a keyed channel: the master
fetches a key from its key manager over the ETSI-shaped HTTP interface,
announces the key id to the slave over the broker (standing in for the
ciphers' own protocol), the slave fetches the same id from its key
manager, and the channel counts as established only if both materials
agree bitwise.  Traffic is modeled as a byte counter; the faster the
data rate, the more often the key is refreshed.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field
from typing import Optional

from .broker import Broker, unicast
from .errors import KeyMismatch
from .kmm import Kmm, QosSpec

DEFAULT_KEY_BUDGET_BYTES = 1_000_000
MIN_REFRESH_INTERVAL = 1.0
MAX_REFRESH_INTERVAL = 3600.0


def refresh_interval(
    data_rate_bps: float,
    budget_bytes: int = DEFAULT_KEY_BUDGET_BYTES,
    min_interval: float = MIN_REFRESH_INTERVAL,
    max_interval: float = MAX_REFRESH_INTERVAL,
) -> float:
    """Seconds between key refreshes for a given application data rate.

    One key covers budget_bytes of traffic, so the interval is inversely
    proportional to the rate, clamped to [min_interval, max_interval];
    an idle channel refreshes at the maximum interval.
    """
    if data_rate_bps < 0:
        raise ValueError("data_rate_bps must be >= 0")
    if data_rate_bps == 0:
        return max_interval
    return min(max(budget_bytes * 8.0 / data_rate_bps, min_interval), max_interval)


@dataclass
class SaeEndpoint:
    sae_id: str
    kmm: str
    role: str  # master | slave


@dataclass
class SecureChannel:
    ksid: Optional[str]
    master_sae: str
    slave_sae: str
    data_rate_bps: float
    refresh_interval: float
    current_key_id: Optional[str] = None
    established: bool = False
    stale: bool = False
    bytes_since_refresh: float = 0.0
    last_refresh_at: float = 0.0
    key_id_history: list = field(default_factory=list)


class SaePair:
    """Drives one master/slave application pair against two key managers.

    http clients speak the northbound interface (anything with .get/.post
    returning .status_code/.json()); key lifecycle side effects that the
    northbound surface does not carry (retiring a superseded key) go
    through the key managers directly, as a co-located cipher would.
    """

    def __init__(
        self,
        master: SaeEndpoint,
        slave: SaeEndpoint,
        qos: QosSpec,
        data_rate_bps: float,
        broker: Broker,
        master_kmm: Kmm,
        slave_kmm: Kmm,
        master_http,
        slave_http,
        refresh_mode: str = "fresh",  # fresh | replace
        budget_bytes: int = DEFAULT_KEY_BUDGET_BYTES,
        retry_backoff: float = 0.5,
        grace_multiplier: float = 3.0,
        event_log=None,
    ) -> None:
        if refresh_mode not in ("fresh", "replace"):
            raise ValueError("refresh_mode must be 'fresh' or 'replace'")
        self.master = master
        self.slave = slave
        self.qos = qos
        self.broker = broker
        self.master_kmm = master_kmm
        self.slave_kmm = slave_kmm
        self.master_http = master_http
        self.slave_http = slave_http
        self.refresh_mode = refresh_mode
        self.retry_backoff = retry_backoff
        self.grace_multiplier = grace_multiplier
        self.event_log = event_log
        self.token = f"{master.sae_id}-pair-token"
        broker.register_service(master.sae_id, self.token)
        broker.register_service(slave.sae_id, self.token)
        interval = refresh_interval(data_rate_bps, budget_bytes)
        self.channel = SecureChannel(
            ksid=None,
            master_sae=master.sae_id,
            slave_sae=slave.sae_id,
            data_rate_bps=data_rate_bps,
            refresh_interval=interval,
        )
        self.session = None
        # key_id -> (material, issued_at, replaces) awaiting the slave fetch
        self._pending: dict[str, tuple] = {}
        self.refresh_count = 0
        self.refresh_latencies: list[float] = []
        self.starvation_count = 0
        self.failure: Optional[str] = None

    # -- lifecycle ----------------------------------------------------------

    def start(self, now: float) -> None:
        """Open the QoS session (reservation + path, when remote)."""
        try:
            self.session = self.master_kmm.open_session(
                self.master.sae_id, self.slave.sae_id, self.qos, now
            )
            self.channel.ksid = str(self.session.ksid)
        except Exception as exc:
            self.failure = type(exc).__name__
            raise

    def tick(self, now: float) -> float:
        """Establish or refresh as due; returns seconds until the next tick."""
        if self.failure:
            return self.channel.refresh_interval
        if self.session is not None and self.session.status == "closed":
            self.failure = f"session_{self.session.close_reason}"
            return self.channel.refresh_interval
        ok = self._issue_key(now)
        if not ok:
            self._check_stale(now)
            return self.retry_backoff
        return self.channel.refresh_interval

    def _check_stale(self, now: float) -> None:
        if not self.channel.established:
            return
        grace = self.grace_multiplier * self.channel.refresh_interval
        if now - self.channel.last_refresh_at > grace:
            self.channel.stale = True

    def _issue_key(self, now: float) -> bool:
        """Master-side fetch plus announcement; False on starvation."""
        old_id = self.channel.current_key_id
        if self.refresh_mode == "replace" and old_id is not None:
            try:
                served = self.master_kmm.replace_key(old_id, self.master.sae_id, now)
            except Exception:
                self.starvation_count += 1
                return False
            key_id = served["key_id"]
            material = served["material"]
            replaces = None  # the pin carries the retirement
        else:
            resp = self.master_http.post(
                f"/api/v1/keys/{self.slave.sae_id}/enc_keys",
                json={
                    "number": 1,
                    "size": self.qos.key_chunk_size_bits,
                    "sae_id": self.master.sae_id,
                },
            )
            if resp.status_code != 200:
                self.starvation_count += 1
                if self.event_log is not None:
                    self.event_log.emit(now, "channel_starved",
                                        master_sae=self.master.sae_id,
                                        slave_sae=self.slave.sae_id)
                return False
            entry = resp.json()["keys"][0]
            key_id = entry["key_ID"]
            material = base64.b64decode(entry["key"])
            replaces = old_id
            if old_id is not None:
                self.master_kmm.retire_key(old_id, self.master.sae_id, now)
        self._pending[key_id] = (material, now, replaces)
        self.broker.publish(
            unicast(self.master.sae_id, self.slave.sae_id, "key_announce", {
                "key_id": key_id,
                "master_sae": self.master.sae_id,
                "slave_sae": self.slave.sae_id,
                "replaces": replaces,
                "issued_at": now,
            }),
            self.token,
        )
        return True

    def handle_envelope(self, env, now: float) -> None:
        if env.payload_kind != "key_announce":
            return
        self._complete_refresh(env.payload, now)

    def _complete_refresh(self, payload: dict, now: float) -> None:
        key_id = payload["key_id"]
        pending = self._pending.pop(key_id, None)
        if pending is None:
            return
        master_material, issued_at, replaces = pending
        resp = self.slave_http.post(
            f"/api/v1/keys/{self.master.sae_id}/dec_keys",
            json={"key_IDs": [key_id], "sae_id": self.slave.sae_id},
        )
        if resp.status_code != 200:
            self.starvation_count += 1
            return
        slave_material = base64.b64decode(resp.json()["keys"][0]["key"])
        if slave_material != master_material:
            self.failure = "KeyMismatch"
            raise KeyMismatch(
                f"{self.master.sae_id}/{self.slave.sae_id} disagree on key {key_id}"
            )
        if replaces is not None:
            self.slave_kmm.retire_key(replaces, self.slave.sae_id, now)
        ch = self.channel
        ch.current_key_id = key_id
        ch.key_id_history.append(key_id)
        ch.bytes_since_refresh = 0.0
        ch.last_refresh_at = now
        ch.stale = False
        first = not ch.established
        ch.established = True
        self.refresh_count += 1
        self.refresh_latencies.append(now - issued_at)
        if self.event_log is not None:
            if first:
                self.event_log.emit(now, "channel_established",
                                    master_sae=self.master.sae_id,
                                    slave_sae=self.slave.sae_id,
                                    key_id=key_id)
            self.event_log.emit(now, "channel_refresh",
                                master_sae=self.master.sae_id,
                                slave_sae=self.slave.sae_id,
                                key_id=key_id,
                                latency=now - issued_at)

    # -- standalone traffic accounting ---------------------------------------

    def run_traffic(self, dt: float, now: float) -> list[float]:
        """Accrue dt seconds of traffic; perform refreshes at byte boundaries.

        Returns the virtual times at which refreshes were issued.  Used
        for direct (non-event-loop) driving; the harness drives ticks
        instead.
        """
        if dt <= 0:
            raise ValueError("dt must be > 0")
        ch = self.channel
        if not ch.established:
            return []
        budget = ch.data_rate_bps / 8.0 * ch.refresh_interval
        refreshed_at = []
        remaining = dt
        t = now - dt
        while remaining > 0:
            to_boundary = (
                (budget - ch.bytes_since_refresh) / (ch.data_rate_bps / 8.0)
                if ch.data_rate_bps > 0 else float("inf")
            )
            if to_boundary > remaining + 1e-9:
                ch.bytes_since_refresh += ch.data_rate_bps / 8.0 * remaining
                break
            t += to_boundary
            remaining -= to_boundary
            ch.bytes_since_refresh = 0.0
            if self._issue_key(t):
                refreshed_at.append(t)
        return refreshed_at

    def metrics(self) -> dict:
        ch = self.channel
        lat = self.refresh_latencies
        return {
            "master_sae": self.master.sae_id,
            "slave_sae": self.slave.sae_id,
            "ksid": ch.ksid,
            "established": ch.established,
            "stale": ch.stale,
            "failure": self.failure,
            "refresh_count": self.refresh_count,
            "refresh_interval": ch.refresh_interval,
            "mean_refresh_latency": sum(lat) / len(lat) if lat else 0.0,
            "max_refresh_latency": max(lat) if lat else 0.0,
            "starvation_count": self.starvation_count,
            "key_ids_issued": len(ch.key_id_history),
            "distinct_key_ids": len(set(ch.key_id_history)),
        }
