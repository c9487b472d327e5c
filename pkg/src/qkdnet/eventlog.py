"""Structured run log.

Every notable simulator event is appended as one flat dict; the log can
be dumped as JSON Lines and independently replayed to recount report
totals, which is how reports are reconciled.
"""

from __future__ import annotations

import json
from typing import Iterable


class EventLog:
    def __init__(self) -> None:
        self.records: list[dict] = []

    def emit(self, t: float, kind: str, **fields) -> None:
        rec = {"t": t, "kind": kind}
        rec.update(fields)
        self.records.append(rec)

    def of_kind(self, kind: str) -> list[dict]:
        return [r for r in self.records if r["kind"] == kind]

    def dump_jsonl(self) -> str:
        return "\n".join(json.dumps(r, sort_keys=True) for r in self.records)

    def write(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.dump_jsonl())
            if self.records:
                fh.write("\n")


def load_jsonl(path: str) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def replay_totals(records: Iterable[dict]) -> dict:
    """Recount run totals from the raw event log.

    Deliberately knows nothing about the live objects: it is the
    independent side of the report-reconciliation check.
    """
    links: dict[str, dict] = {}
    kmms: dict[str, dict] = {}
    relays_completed = 0
    refreshes = 0

    def link(lid: str) -> dict:
        return links.setdefault(lid, {"generated_blocks": 0, "generated_bits": 0})

    def kmm(kid: str) -> dict:
        return kmms.setdefault(
            kid, {"keys_stored": 0, "keys_served": 0, "keys_expired": 0, "keys_rejected": 0}
        )

    for rec in records:
        kind = rec["kind"]
        if kind == "block_generated":
            entry = link(rec["link_id"])
            entry["generated_blocks"] += 1
            entry["generated_bits"] += rec["size_bits"]
        elif kind == "key_stored":
            kmm(rec["kmm"])["keys_stored"] += 1
        elif kind == "key_served":
            kmm(rec["kmm"])["keys_served"] += rec.get("number", 1)
        elif kind == "key_rejected":
            kmm(rec["kmm"])["keys_rejected"] += 1
        elif kind == "key_transition" and rec.get("to") == "expired":
            kmm(rec["kmm"])["keys_expired"] += 1
        elif kind == "relay_delivered":
            relays_completed += 1
        elif kind == "channel_refresh":
            refreshes += 1

    return {
        "links": links,
        "kmms": kmms,
        "relays_completed": relays_completed,
        "channel_refreshes": refreshes,
    }
