"""User-node KMS: the SAE-facing boundary.

Accepts SAE key requests, enriches them with the user account and hands
them to the access KMS, buffers unwrapped KSA keys and releases them only to
the SAEs bound to the exchange.
"""

from __future__ import annotations

import base64
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum

from .actor import Actor, Alarm, AlarmKind, Severity
from .crypto_relay import AuthFail, KeyChannel, WrappedKey, unwrap
from .domain import EntityId, KeyBlock, MsgKind, ProtocolMessage, QkdnError, eid

MIN_KEY_BITS = 64
MAX_KEY_BITS = 4096
BUFFER_PER_PAIR = 16


@dataclass(frozen=True)
class SaeRequest:
    master_sae: EntityId
    slave_sae: EntityId
    number: int
    size_bits: int
    correlation_id: str = ""

    def validate(self) -> None:
        if self.number < 1:
            raise QkdnError("OVERSIZE_REQUEST", "number must be >= 1")
        if not MIN_KEY_BITS <= self.size_bits <= MAX_KEY_BITS or self.size_bits % 8:
            raise QkdnError("OVERSIZE_REQUEST", f"size {self.size_bits} outside 64..4096/8")

    def to_payload(self) -> dict:
        return {"master_sae": str(self.master_sae), "slave_sae": str(self.slave_sae),
                "number": self.number, "size_bits": self.size_bits}


@dataclass(frozen=True)
class EnrichedRequest:
    inner: SaeRequest
    user_account: str
    ukms_id: EntityId

    def __post_init__(self) -> None:
        if not self.user_account:
            raise QkdnError("UNKNOWN_USER", "empty user account")

    def to_payload(self) -> dict:
        return {"request": self.inner.to_payload(), "user_account": self.user_account,
                "ukms_id": str(self.ukms_id)}


class ExchangeState(str, Enum):
    WAITING = "WAITING"
    READY = "READY"
    DELIVERED = "DELIVERED"
    FAILED = "FAILED"


@dataclass
class Exchange:
    correlation_id: str
    master_sae: EntityId
    slave_sae: EntityId
    number: int
    size_bits: int
    initiator: bool
    state: ExchangeState = ExchangeState.WAITING
    keys: list[KeyBlock] = field(default_factory=list)
    reason: str = ""

    @property
    def local_sae(self) -> EntityId:
        return self.master_sae if self.initiator else self.slave_sae

    def key_ids(self) -> list[str]:
        return [k.key_id for k in self.keys]


def key_entry(block: KeyBlock) -> dict:
    return {"key_ID": block.key_id, "key": base64.b64encode(block.bits).decode()}


class Ukms(Actor):
    """One UKMS serving the SAEs registered to it."""

    def __init__(self, eid_: EntityId, net, *, akms: EntityId, channel: KeyChannel,
                 saes: dict[EntityId, str], buffer_per_pair: int = BUFFER_PER_PAIR,
                 retry_after: float = 0.05, history: int = 4096) -> None:
        super().__init__(eid_, net, None)
        self.akms = akms
        self.channel = channel
        self.saes = dict(saes)
        self.buffer_per_pair = buffer_per_pair
        self.retry_after = retry_after
        self.exchanges: OrderedDict[str, Exchange] = OrderedDict()
        self.history = history

    # UKMS has no route to the Manager; alarms stay in the local log.
    def alarm(self, kind: AlarmKind, severity: Severity = Severity.WARN, detail: str = "") -> None:
        self.local_alarms.append(Alarm(self.net.now, self.eid, severity, kind, detail))

    def _remember(self, ex: Exchange) -> None:
        self.exchanges[ex.correlation_id] = ex
        while len(self.exchanges) > self.history:
            self.exchanges.popitem(last=False)

    def buffered(self, a: EntityId, b: EntityId) -> int:
        pair = frozenset({a, b})
        return sum(len(ex.keys) for ex in self.exchanges.values()
                   if ex.state is ExchangeState.READY
                   and frozenset({ex.master_sae, ex.slave_sae}) == pair)

    # -- SAE side -----------------------------------------------------------
    def handle_sae_request(self, req: SaeRequest) -> Exchange:
        if req.master_sae not in self.saes:
            raise QkdnError("UNKNOWN_SAE", str(req.master_sae))
        req.validate()
        enriched = EnrichedRequest(req, self.saes[req.master_sae], self.eid)
        ex = Exchange(req.correlation_id, req.master_sae, req.slave_sae, req.number,
                      req.size_bits, initiator=True)
        self._remember(ex)
        self.send(self.akms, MsgKind.ENRICHED_REQUEST, enriched.to_payload(), req.correlation_id)
        return ex

    def deliver_to_sae(self, sae: EntityId, correlation_id: str | None = None,
                       key_ids: list[str] | None = None) -> list[KeyBlock]:
        ex = self._find(correlation_id, key_ids)
        if ex is None:
            raise QkdnError("NOT_READY", "exchange not known yet")
        if sae != ex.local_sae:
            raise QkdnError("FORBIDDEN", f"{sae} is not bound to this key")
        if ex.state is ExchangeState.FAILED:
            raise QkdnError(ex.reason or "FAILED")
        if ex.state is ExchangeState.WAITING:
            raise QkdnError("NOT_READY", "keys not yet pushed")
        if key_ids is not None and set(key_ids) - set(ex.key_ids()):
            raise QkdnError("NOT_READY", "unknown key ids")
        ex.state = ExchangeState.DELIVERED
        return list(ex.keys)

    def _find(self, correlation_id: str | None, key_ids: list[str] | None) -> Exchange | None:
        if correlation_id and correlation_id in self.exchanges:
            return self.exchanges[correlation_id]
        if key_ids:
            for ex in reversed(self.exchanges.values()):
                if key_ids[0] in ex.key_ids():
                    return ex
        return None

    def status(self, slave: EntityId, master: EntityId | None = None) -> dict:
        stored = sum(len(ex.keys) for ex in self.exchanges.values()
                     if ex.state is ExchangeState.READY and slave in (ex.slave_sae, ex.master_sae)
                     and (master is None or master in (ex.slave_sae, ex.master_sae)))
        return {"stored_key_count": stored, "key_size": 256,
                "max_key_count": self.buffer_per_pair}

    def on_key_request(self, msg: ProtocolMessage) -> None:
        p = msg.payload
        corr = msg.correlation_id
        if p.get("op", "enc") == "dec":
            try:
                keys = self.deliver_to_sae(msg.src, corr, p.get("key_ids"))
            except QkdnError as exc:
                extra = {"retry_after": self.retry_after} if exc.code == "NOT_READY" else {}
                self.error(msg.src, exc.code, corr, **extra)
                return
            self.send(msg.src, MsgKind.KSA_DELIVER, {"keys": [key_entry(k) for k in keys]}, corr)
            return
        try:
            self.handle_sae_request(SaeRequest(msg.src, eid(p["slave_sae"]), int(p["number"]),
                                               int(p["size_bits"]), corr))
        except (QkdnError, KeyError, ValueError) as exc:
            code = exc.code if isinstance(exc, QkdnError) else "BAD_REQUEST"
            self.error(msg.src, code, corr)

    # -- AKMS side ----------------------------------------------------------
    def receive_ksa(self, wrapped: list[WrappedKey], correlation_id: str,
                    announce: dict | None = None) -> Exchange:
        ex = self.exchanges.get(correlation_id)
        if ex is None:
            if not announce:
                self.alarm(AlarmKind.NO_SUCH_EXCHANGE, detail=correlation_id)
                raise QkdnError("NO_SUCH_EXCHANGE", correlation_id)
            ex = Exchange(correlation_id, eid(announce["master_sae"]), eid(announce["slave_sae"]),
                          int(announce["number"]), int(announce["size_bits"]), initiator=False)
            if ex.slave_sae not in self.saes:
                raise QkdnError("UNKNOWN_SAE", str(ex.slave_sae))
            if self.buffered(ex.master_sae, ex.slave_sae) + ex.number > self.buffer_per_pair:
                raise QkdnError("BUFFER_FULL")
            self._remember(ex)
        if ex.state in (ExchangeState.READY, ExchangeState.DELIVERED):
            if [w.key_id for w in wrapped] == ex.key_ids():
                return ex  # replayed push
            raise QkdnError("DUPLICATE_EXCHANGE", correlation_id)
        if ex.state is ExchangeState.FAILED:
            raise QkdnError(ex.reason or "FAILED", correlation_id)
        keys = [unwrap(w, self.channel, created_at=self.net.now) for w in wrapped]
        ex.keys = keys
        ex.state = ExchangeState.READY
        return ex

    def on_ksa_push(self, msg: ProtocolMessage) -> None:
        corr = msg.correlation_id
        p = msg.payload
        announce = p if "master_sae" in p else None
        try:
            wrapped = [WrappedKey.from_payload(w) for w in p.get("keys", [])]
            ex = self.receive_ksa(wrapped, corr, announce)
        except AuthFail:
            self.alarm(AlarmKind.AUTH_FAIL, detail=corr)
            self._fail(corr, "AUTH_FAIL")
            self.error(msg.src, "AUTH_FAIL", corr)
            return
        except QkdnError as exc:
            self.error(msg.src, exc.code, corr)
            return
        self.send(msg.src, MsgKind.KSA_ACK, {"key_ids": ex.key_ids()}, corr)
        if ex.initiator and ex.state is ExchangeState.READY:
            keys = self.deliver_to_sae(ex.master_sae, corr)
            self.send(ex.master_sae, MsgKind.KSA_DELIVER, {"keys": [key_entry(k) for k in keys]},
                      corr)

    def _fail(self, corr: str, reason: str) -> Exchange | None:
        ex = self.exchanges.get(corr)
        if ex is not None and ex.state is not ExchangeState.DELIVERED:
            ex.state = ExchangeState.FAILED
            ex.reason = reason
            ex.keys = []
        return ex

    def on_error(self, msg: ProtocolMessage) -> None:
        reason = msg.payload.get("reason", "FAILED")
        ex = self._fail(msg.correlation_id, reason)
        if ex is not None and ex.initiator:
            self.error(ex.master_sae, reason, msg.correlation_id)
