"""Post-run checks over key-store consumption logs and message traces.

Every check returns a list of violation strings; empty means the property
held. Trace checks work on the JSON records written by ``TraceWriter`` so
they can run on a trace file long after the run that produced it.
"""

from __future__ import annotations

import base64
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .domain import EntityId, KeyStore, Lane, iter_strings

CARRIER_MARKERS = ("CKMS:", "CONTROLLER:", "QKD_MODULE:")


@dataclass
class UseAudit:
    tx_bits: int = 0
    rx_bits: int = 0
    reused: list[str] = field(default_factory=list)
    unmatched: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.reused


def _overlaps(intervals: list[tuple[int, int]]) -> list[tuple[int, int]]:
    bad = []
    intervals.sort()
    end = -1
    for start, n in intervals:
        if start < end:
            bad.append((start, n))
        end = max(end, start + n)
    return bad


def one_time_use(stores: Iterable[KeyStore]) -> UseAudit:
    """No fragment of any block may be spent twice from the same pool, and
    what one end sent with should be exactly what its peer received with."""
    out = UseAudit()
    spent: dict[tuple, list[tuple[int, int]]] = defaultdict(list)
    tx: dict[tuple, set] = defaultdict(set)
    rx: dict[tuple, set] = defaultdict(set)
    for store in stores:
        for rec in store.audit:
            spent[(store.owner, rec.peer, rec.root_id)].append((rec.offset, rec.n_bits))
            frag = (rec.root_id, rec.offset, rec.n_bits)
            if rec.lane is Lane.TX:
                out.tx_bits += rec.n_bits
                tx[(store.owner, rec.peer)].add(frag)
            else:
                out.rx_bits += rec.n_bits
                rx[(rec.peer, store.owner)].add(frag)
    for (owner, peer, root), intervals in sorted(spent.items(), key=lambda kv: str(kv[0])):
        for start, n in _overlaps(intervals):
            out.reused.append(f"{owner}/{peer}: {root}@{start}+{n}")
    for pair in sorted(set(tx) | set(rx), key=str):
        missing = tx.get(pair, set()) ^ rx.get(pair, set())
        if missing:
            out.unmatched.append(f"{pair[0]}->{pair[1]}: {len(missing)} fragments")
    return out


def kma_bits_spent(stores: Iterable[KeyStore]) -> int:
    """Key material spent on the sending side (every protected key leg)."""
    return sum(r.n_bits for s in stores for r in s.audit if r.lane is Lane.TX)


def _kind(entity: str) -> str:
    return entity.split(":", 1)[0]


def _sent(records: Iterable[dict]) -> list[dict]:
    return [r for r in records if r.get("event") == "send"]


def key_encodings(bits: bytes) -> set[str]:
    return {bits.hex(), bits.hex().upper(), base64.b64encode(bits).decode()}


class _Needles:
    """Exact substring search for many needles: set lookups over every
    window whose length matches some needle."""

    def __init__(self, needles: Iterable) -> None:
        self.by_len: dict[int, set] = defaultdict(set)
        for n in needles:
            if n:
                self.by_len[len(n)].add(n)

    def found_in(self, hay) -> bool:
        for n, group in self.by_len.items():
            if any(hay[i:i + n] in group for i in range(len(hay) - n + 1)):
                return True
        return False


def ksa_containment(records: Iterable[dict], ksa_bits: Iterable[bytes],
                    stores: Iterable[KeyStore] = ()) -> list[str]:
    """Final keys never reach carrier nodes or the controller, in any encoding."""
    raw = set(ksa_bits)
    text = _Needles(e for bits in raw for e in key_encodings(bits))
    octets = _Needles(raw)
    bad = []
    for r in records:
        ends = {_kind(r["from"]), _kind(r["to"])}
        if not ends & {"CKMS", "CONTROLLER"}:
            continue
        if any(text.found_in(s) for s in iter_strings(r.get("payload", {}))):
            bad.append(f"seq {r['seq']}: {r['kind']} {r['from']}->{r['to']}")
    for store in stores:
        if not str(store.owner).startswith("CKMS:"):
            continue
        for peer in store.peers():
            for lane in Lane:
                for blk in store.blocks(peer, lane):
                    if octets.found_in(blk.bits):
                        bad.append(f"{store.owner}: pool {peer} holds final key material")
    return bad


def topology_hiding(records: Iterable[dict], carrier_nodes: Iterable[str] = ()) -> list[str]:
    """Nothing addressed to a UKMS or SAE names a carrier-side entity."""
    nodes = set(carrier_nodes)
    bad = []
    for r in _sent(records):
        if _kind(r["to"]) not in ("UKMS", "SAE"):
            continue
        for s in iter_strings(r.get("payload", {})):
            if s in nodes or any(m in s for m in CARRIER_MARKERS):
                bad.append(f"seq {r['seq']}: {r['kind']} to {r['to']} mentions {s}")
                break
    return bad


def flow_direction(records: Iterable[dict]) -> list[str]:
    """Key data never flows from a UKMS up to an AKMS."""
    return [f"seq {r['seq']}: {r['kind']} {r['from']}->{r['to']}"
            for r in records
            if _kind(r["from"]) == "UKMS" and _kind(r["to"]) == "AKMS"
            and r.get("asset_class") == "KEY_DATA" and r.get("event") in ("send", "down")]


def akms_controller_denied(records: Iterable[dict]) -> tuple[int, list[str]]:
    """Every AKMS->CONTROLLER attempt must have been refused by the gate."""
    attempts = [r for r in records
                if _kind(r["from"]) == "AKMS" and _kind(r["to"]) == "CONTROLLER"]
    bad = [f"seq {r['seq']}: {r['event']} {r.get('reason', '')}" for r in attempts
           if not (r["event"] == "deny" and r.get("reason") == "POLICY_DENY")]
    return len(attempts), bad


def demarcation(records: Iterable[dict]) -> list[str]:
    """User-profile data stays on the access side."""
    bad = []
    for r in _sent(records):
        ends = {_kind(r["from"]), _kind(r["to"])}
        if ends & {"CKMS", "CONTROLLER"} and r.get("asset_class") == "USER_PROFILE":
            bad.append(f"seq {r['seq']}: {r['kind']} {r['from']}->{r['to']}")
        if ends & {"CKMS", "CONTROLLER"} and "user_account" in json.dumps(r.get("payload", {})):
            bad.append(f"seq {r['seq']}: account data to {r['to']}")
    return bad


def read_trace(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def check_trace(records: list[dict], carrier_nodes: Iterable[str] = ()) -> dict[str, list[str]]:
    """The trace-only subset of the audits; used by ``qkdn trace-check``."""
    seqs = [r["seq"] for r in records]
    order = [] if seqs == sorted(seqs) and len(set(seqs)) == len(seqs) else ["seq not increasing"]
    times = [r["t"] for r in records]
    order += [] if times == sorted(times) else ["time goes backwards"]
    _, denied = akms_controller_denied(records)
    return {
        "ordering": order,
        "topology_hiding": topology_hiding(records, carrier_nodes),
        "flow_direction": flow_direction(records),
        "akms_controller": denied,
        "demarcation": demarcation(records),
    }


def carrier_node_names(stores_or_entities: Iterable[EntityId | KeyStore]) -> set[str]:
    out = set()
    for x in stores_or_entities:
        e = x.owner if isinstance(x, KeyStore) else x
        if e.kind.value == "CKMS":
            out.add(str(e))
    return out
