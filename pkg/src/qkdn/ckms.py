"""Carrier-node KMS: hop-by-hop relay of session keys along
controller-installed routes, plus periodic pool telemetry."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

from .actor import Actor, AlarmKind
from .crypto_relay import AuthFail, KeyChannel, Mode, WrappedKey, unwrap, wrap
from .domain import (EntityId, InsufficientKey, KeyBlock, KeyRole, KeyStore, LOCAL_RNG, MsgKind,
                     ProtocolMessage, eid)

MAX_HOPS = 32


@dataclass
class RoutingTable:
    """Destination -> next hop (``None`` = deliver locally); every update bumps
    the version, and a lookup sees either the old or new entry, never a mix."""

    entries: dict[EntityId, EntityId | None] = field(default_factory=dict)
    version: int = 0

    def apply(self, dest: EntityId, next_hop: EntityId | None, remove: bool = False) -> int:
        if remove:
            self.entries.pop(dest, None)
        else:
            self.entries[dest] = next_hop
        self.version += 1
        return self.version

    def lookup(self, dest: EntityId) -> tuple[bool, EntityId | None]:
        if dest not in self.entries:
            return False, None
        return True, self.entries[dest]


@dataclass
class RelayFrame:
    correlation_id: str
    destination: EntityId
    qbn: KeyBlock
    hop_count: int = 0


class Ckms(Actor):
    def __init__(self, eid_: EntityId, net, *, controller: EntityId, store: KeyStore,
                 channels: dict[EntityId, KeyChannel], akms: EntityId | None = None,
                 mode: Mode | str = Mode.OTP, manager: EntityId | None = None,
                 max_hops: int = MAX_HOPS, key_wait_timeout: float = 10.0,
                 status_interval: float = 30.0, ewma_half_life: int = 5,
                 history: int = 4096) -> None:
        super().__init__(eid_, net, manager)
        self.controller = controller
        self.store = store
        self.channels = channels
        self.akms = akms
        self.mode = Mode(mode)
        self.max_hops = max_hops
        self.key_wait_timeout = key_wait_timeout
        self.status_interval = status_interval
        self.table = RoutingTable()
        self.pending: dict[str, RelayFrame] = {}
        self.stalled: dict[str, tuple[RelayFrame, EntityId, object]] = {}
        self.upstream: OrderedDict[str, EntityId] = OrderedDict()
        self.history = history
        self.relayed = 0
        self.corrupt_next = False  # fault injection: flip one bit of the next local delivery
        self._ewma_alpha = ewma_half_life_alpha(ewma_half_life)
        self._rate: dict[EntityId, float] = {}
        self._last_refilled: dict[EntityId, int] = {}
        store.listeners.append(self._on_refill)

    def _track_upstream(self, corr: str, hop: EntityId) -> None:
        self.upstream[corr] = hop
        while len(self.upstream) > self.history:
            self.upstream.popitem(last=False)

    def nack(self, corr: str, reason: str) -> None:
        hop = self.upstream.pop(corr, None)
        if hop is not None:
            self.error(hop, reason, corr)

    # -- relay ----------------------------------------------------------------
    def on_qbn_relay(self, msg: ProtocolMessage) -> None:
        p = msg.payload
        corr = msg.correlation_id
        dest = eid(p["dest"])
        if msg.src == self.akms:
            q = p["qbn"]
            frame = RelayFrame(corr, dest, KeyBlock(q["key_id"], bytes.fromhex(q["bits"]),
                                                    LOCAL_RNG, KeyRole.QBN, self.net.now))
            self._track_upstream(corr, msg.src)
            self.route_request(frame)
            return
        if msg.src not in self.channels:
            return
        self._track_upstream(corr, msg.src)
        hop_count = int(p.get("hop_count", 0))
        try:
            wrapped = WrappedKey.from_payload(p["wrapped"])
            qbn = unwrap(wrapped, self.channels[msg.src], created_at=self.net.now)
        except AuthFail as exc:
            self.alarm(AlarmKind.AUTH_FAIL, detail=f"{corr} {exc.detail}")
            self.nack(corr, "AUTH_FAIL")
            return
        self.relay(RelayFrame(corr, dest, qbn, hop_count))

    def relay(self, frame: RelayFrame) -> None:
        if frame.destination == self.eid:
            self._deliver_local(frame)
            return
        if frame.hop_count >= self.max_hops:
            self.nack(frame.correlation_id, "HOP_LIMIT")
            return
        known, next_hop = self.table.lookup(frame.destination)
        if not known or next_hop is None:
            self.route_request(frame)
            return
        self._forward(frame, next_hop)

    def _forward(self, frame: RelayFrame, next_hop: EntityId) -> None:
        try:
            wrapped = wrap(frame.qbn, self.channels[next_hop], self.mode)
        except InsufficientKey:
            self._stall(frame, next_hop)
            return
        receipt = self.send(next_hop, MsgKind.QBN_RELAY,
                            {"dest": str(frame.destination), "hop_count": frame.hop_count + 1,
                             "wrapped": wrapped.to_payload()}, frame.correlation_id)
        if not receipt:
            self.nack(frame.correlation_id, receipt.reason)
            return
        self.relayed += 1

    def _deliver_local(self, frame: RelayFrame) -> None:
        bits = frame.qbn.bits
        if self.corrupt_next:
            self.corrupt_next = False
            bits = bytes([bits[0] ^ 0x01]) + bits[1:]
        self.upstream.pop(frame.correlation_id, None)
        self.send(self.akms, MsgKind.QBN_RELAY,
                  {"dest": str(self.eid), "hop_count": frame.hop_count,
                   "qbn": {"key_id": frame.qbn.key_id, "bits": bits.hex()}},
                  frame.correlation_id)

    # -- starvation: hold the frame until the outbound pool refills --------------
    def _stall(self, frame: RelayFrame, next_hop: EntityId) -> None:
        corr = frame.correlation_id

        def give_up() -> None:
            if self.stalled.pop(corr, None) is not None:
                self.alarm(AlarmKind.KEY_STARVATION, detail=corr)
                self.nack(corr, "KEY_STARVATION")

        self.stalled[corr] = (frame, next_hop, self.net.schedule(self.key_wait_timeout, give_up))

    def _on_refill(self, peer: EntityId, n_bits: int) -> None:
        for corr, (frame, next_hop, timer) in list(self.stalled.items()):
            if next_hop != peer:
                continue
            try:
                wrapped = wrap(frame.qbn, self.channels[next_hop], self.mode)
            except InsufficientKey:
                continue
            timer.cancel()
            del self.stalled[corr]
            self.send(next_hop, MsgKind.QBN_RELAY,
                      {"dest": str(frame.destination), "hop_count": frame.hop_count + 1,
                       "wrapped": wrapped.to_payload()}, corr)
            self.relayed += 1

    # -- routing --------------------------------------------------------------
    def route_request(self, frame: RelayFrame) -> None:
        self.pending[frame.correlation_id] = frame
        receipt = self.send(self.controller, MsgKind.ROUTE_REQUEST,
                            {"src": str(self.eid), "dst": str(frame.destination)},
                            frame.correlation_id)
        if not receipt:
            self.pending.pop(frame.correlation_id, None)
            self.nack(frame.correlation_id, "NO_PATH")

    def on_route_ack(self, msg: ProtocolMessage) -> None:
        frame = self.pending.pop(msg.correlation_id, None)
        if frame is None:
            return
        if not msg.payload.get("ok"):
            self.nack(frame.correlation_id, msg.payload.get("reason", "NO_PATH"))
            return
        known, next_hop = self.table.lookup(frame.destination)
        if not known or next_hop is None:
            self.nack(frame.correlation_id, "NO_ROUTE")
            return
        self._forward(frame, next_hop)

    def on_route_update(self, msg: ProtocolMessage) -> None:
        p = msg.payload
        dest = eid(p["dest"])
        nxt = eid(p["next_hop"]) if p.get("next_hop") else None
        if nxt is not None and nxt not in self.channels:
            self.send(msg.src, MsgKind.ROUTE_ACK, {"ok": False, "reason": "NOT_ADJACENT",
                                                   "install_id": p.get("install_id")},
                      msg.correlation_id)
            return
        version = self.table.apply(dest, nxt, remove=bool(p.get("remove")))
        self.send(msg.src, MsgKind.ROUTE_ACK, {"ok": True, "version": version,
                                               "install_id": p.get("install_id")},
                  msg.correlation_id)

    def on_error(self, msg: ProtocolMessage) -> None:
        # A downstream hop gave up: pass the NACK towards the entry point.
        self.nack(msg.correlation_id, msg.payload.get("reason", "FAILED"))

    # -- telemetry ------------------------------------------------------------
    def link_report(self) -> list[dict]:
        out = []
        for peer in sorted(self.channels):
            refilled = self.store.counters[peer].refilled_bits if peer in self.store.counters else 0
            delta = refilled - self._last_refilled.get(peer, refilled)
            self._last_refilled[peer] = refilled
            sample = delta / self.status_interval
            prev = self._rate.get(peer)
            rate = sample if prev is None else prev + self._ewma_alpha * (sample - prev)
            self._rate[peer] = rate
            out.append({"peer": str(peer), "available_bits": self.store.pool_bits(peer),
                        "refill_rate_bps": round(rate, 6)})
        return out

    def status_push(self) -> None:
        self.send(self.controller, MsgKind.STATUS_UPDATE, {"links": self.link_report()})


def ewma_half_life_alpha(half_life: int) -> float:
    return 1 - math.pow(0.5, 1 / half_life)
