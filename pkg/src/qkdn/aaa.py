"""AAA service (authentication, authorization, accounting, SAE directory)
and the network Manager (device registry, heartbeats, alarms)."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, TextIO

from .actor import Actor, Alarm, AlarmKind, Severity
from .domain import EntityId, MsgKind, ProtocolMessage, QkdnError, eid


class AaaRejection(QkdnError):
    code = "AAA_REJECT"


class AaaMode(str, Enum):
    STRICT = "strict"
    PERMISSIVE = "permissive"


class Outcome(str, Enum):
    DELIVERED = "DELIVERED"
    REJECTED = "REJECTED"
    FAILED = "FAILED"


@dataclass
class UserProfile:
    account_id: str
    allowed_sae_pairs: set[frozenset[EntityId]]
    max_keys_per_day: int = 1000
    max_key_bits: int = 4096
    payment_valid: bool = True

    def allows(self, a: EntityId, b: EntityId) -> bool:
        return frozenset({a, b}) in self.allowed_sae_pairs

    @classmethod
    def from_dict(cls, data: dict) -> UserProfile:
        pairs = {frozenset({eid(x), eid(y)}) for x, y in data.get("allowed_sae_pairs", [])}
        return cls(data["account_id"], pairs, int(data.get("max_keys_per_day", 1000)),
                   int(data.get("max_key_bits", 4096)), bool(data.get("payment_valid", True)))

    def to_dict(self) -> dict:
        pairs = sorted(sorted(str(e) for e in p) for p in self.allowed_sae_pairs)
        return {"account_id": self.account_id, "allowed_sae_pairs": pairs,
                "max_keys_per_day": self.max_keys_per_day, "max_key_bits": self.max_key_bits,
                "payment_valid": self.payment_valid}


@dataclass(frozen=True)
class TranslationEntry:
    sae: EntityId
    ukms: EntityId
    akms: EntityId


@dataclass(frozen=True)
class AccountingRecord:
    account_id: str
    correlation_id: str
    keys_delivered: int
    bits_delivered: int
    timestamp: float
    outcome: Outcome
    reason: str = ""

    def to_dict(self) -> dict:
        return {"account_id": self.account_id, "correlation_id": self.correlation_id,
                "keys_delivered": self.keys_delivered, "bits_delivered": self.bits_delivered,
                "timestamp": self.timestamp, "outcome": self.outcome.value, "reason": self.reason}


@dataclass(frozen=True)
class ServiceProperties:
    account_id: str
    max_keys_per_day: int
    max_key_bits: int
    remaining_today: int
    peer_ukms: EntityId
    peer_akms: EntityId

    def to_payload(self) -> dict:
        return {"account_id": self.account_id, "max_keys_per_day": self.max_keys_per_day,
                "max_key_bits": self.max_key_bits, "remaining_today": self.remaining_today,
                "peer_ukms": str(self.peer_ukms), "peer_akms": str(self.peer_akms)}

    @classmethod
    def from_payload(cls, data: dict) -> ServiceProperties:
        return cls(data["account_id"], data["max_keys_per_day"], data["max_key_bits"],
                   data["remaining_today"], eid(data["peer_ukms"]), eid(data["peer_akms"]))


DAY_SECONDS = 86400


def quota_day(t: float) -> int:
    """Quota day index: simulated-clock midnight boundaries."""
    return math.floor(t / DAY_SECONDS)


class Aaa(Actor):
    """Serialized validation and accounting service."""

    def __init__(self, eid_: EntityId, net, *, profiles: Iterable[UserProfile],
                 directory: Iterable[TranslationEntry], mode: AaaMode | str = AaaMode.STRICT,
                 manager: EntityId | None = None) -> None:
        super().__init__(eid_, net, manager)
        self.mode = AaaMode(mode)
        self.profiles = {p.account_id: p for p in profiles}
        self.directory = {t.sae: t for t in directory}
        self.records: list[AccountingRecord] = []
        self._terminal: set[str] = set()
        self._reserved: dict[tuple[str, int], int] = {}
        self._pending: dict[str, tuple[str, int, int]] = {}
        self._replies: dict[str, dict] = {}

    # -- directory ------------------------------------------------------------
    def resolve(self, sae: EntityId) -> tuple[EntityId, EntityId]:
        entry = self.directory.get(sae)
        if entry is None:
            raise AaaRejection("UNKNOWN_SAE", str(sae))
        return entry.ukms, entry.akms

    # -- authorization ----------------------------------------------------------
    def _reject(self, account: str, correlation_id: str, reason: str) -> AaaRejection:
        self._write(AccountingRecord(account, correlation_id, 0, 0, self.net.now,
                                     Outcome.REJECTED, reason))
        return AaaRejection(reason)

    def validate(self, request: dict) -> ServiceProperties:
        """Check an enriched request; every rejection leaves one accounting record."""
        account = request.get("user_account", "")
        corr = request.get("correlation_id", "")
        inner = request["request"]
        master, slave = eid(inner["master_sae"]), eid(inner["slave_sae"])
        number, size_bits = int(inner["number"]), int(inner["size_bits"])
        profile = self.profiles.get(account)
        strict = self.mode is AaaMode.STRICT
        if strict and profile is None:
            raise self._reject(account, corr, "UNKNOWN_USER")
        if strict and not profile.payment_valid:
            raise self._reject(account, corr, "PAYMENT_INVALID")
        if strict and not profile.allows(master, slave):
            raise self._reject(account, corr, "PEER_NOT_ALLOWED")
        if strict and size_bits > profile.max_key_bits:
            raise self._reject(account, corr, "KEY_SIZE_NOT_ALLOWED")
        day = quota_day(self.net.now)
        used = self._reserved.get((account, day), 0)
        limit = profile.max_keys_per_day if profile is not None else 1 << 62
        if strict and used + number > limit:
            raise self._reject(account, corr, "QUOTA_EXCEEDED")
        try:
            peer_ukms, peer_akms = self.resolve(slave)
        except AaaRejection as exc:
            raise self._reject(account, corr, exc.code) from None
        self._reserved[(account, day)] = used + number
        self._pending[corr] = (account, day, number)
        return ServiceProperties(account, limit,
                                 profile.max_key_bits if profile else 4096,
                                 limit - used - number, peer_ukms, peer_akms)

    # -- accounting -------------------------------------------------------------
    def _write(self, record: AccountingRecord) -> AccountingRecord:
        if record.correlation_id in self._terminal:
            raise QkdnError("DUPLICATE_RECORD", record.correlation_id)
        self._terminal.add(record.correlation_id)
        self.records.append(record)
        return record

    def record_delivery(self, correlation_id: str, account: str, keys: int, bits: int,
                        outcome: Outcome | str = Outcome.DELIVERED, reason: str = "") -> AccountingRecord:
        outcome = Outcome(outcome)
        record = self._write(AccountingRecord(account, correlation_id, keys, bits, self.net.now,
                                              outcome, reason))
        pending = self._pending.pop(correlation_id, None)
        if pending is not None and outcome is not Outcome.DELIVERED:
            # Failed exchanges give their reserved quota back.
            acct, day, number = pending
            self._reserved[(acct, day)] -= number
        return record

    def usage(self, account: str, day: int | None = None) -> dict:
        recs = [r for r in self.records if r.account_id == account and r.outcome is Outcome.DELIVERED
                and (day is None or quota_day(r.timestamp) == day)]
        return {"account_id": account, "keys_delivered": sum(r.keys_delivered for r in recs),
                "bits_delivered": sum(r.bits_delivered for r in recs), "records": len(recs)}

    def put_profile(self, profile: UserProfile) -> None:
        self.profiles[profile.account_id] = profile

    # -- wire handlers ----------------------------------------------------------
    def on_validate(self, msg: ProtocolMessage) -> None:
        corr = msg.correlation_id
        reply = self._replies.get(corr)
        if reply is None:
            try:
                props = self.validate({**msg.payload, "correlation_id": corr})
                reply = {"ok": True, "properties": props.to_payload()}
            except AaaRejection as exc:
                reply = {"ok": False, "reason": exc.code}
            self._replies[corr] = reply
        self.send(msg.src, MsgKind.SERVICE_PROPERTIES, reply, corr)

    def on_accounting(self, msg: ProtocolMessage) -> None:
        p = msg.payload
        try:
            self.record_delivery(msg.correlation_id, p["account_id"], p["keys"], p["bits"],
                                 p["outcome"], p.get("reason", ""))
        except QkdnError:
            pass
        self._replies.pop(msg.correlation_id, None)


class AlarmCsv:
    header = ["timestamp", "source", "severity", "kind"]

    def __init__(self, out: TextIO | None = None) -> None:
        self.out = out if out is not None else io.StringIO()
        self._writer = csv.writer(self.out, lineterminator="\n")
        self._writer.writerow(self.header)

    def append(self, alarm: Alarm) -> None:
        self._writer.writerow(alarm.row())


_FORWARDED = {AlarmKind.LINK_DOWN.value, AlarmKind.LINK_UP.value}


class Manager(Actor):
    """Device registry, heartbeat tracking and the alarm log."""

    def __init__(self, eid_: EntityId, net, *, devices: Iterable[EntityId],
                 controller: EntityId | None = None, heartbeat_interval: float = 30.0,
                 missed_heartbeats: int = 3, csv_out: AlarmCsv | None = None) -> None:
        super().__init__(eid_, net, None)
        self.devices = set(devices)
        self.controller = controller
        self.heartbeat_interval = heartbeat_interval
        self.missed_heartbeats = missed_heartbeats
        self.alarms: list[Alarm] = []
        self.csv = csv_out
        self.last_seen: dict[EntityId, float] = {d: net.now for d in self.devices}
        self.lapsed: set[EntityId] = set()

    def record(self, source: EntityId, severity: Severity, kind: AlarmKind, detail: str = "") -> Alarm:
        alarm = Alarm(self.net.now, source, Severity(severity), AlarmKind(kind), detail)
        self.alarms.append(alarm)
        if self.csv is not None:
            self.csv.append(alarm)
        return alarm

    def receive(self, msg: ProtocolMessage) -> None:
        self.manager_ingest(msg)

    def manager_ingest(self, msg: ProtocolMessage) -> None:
        if msg.src not in self.devices:
            self.record(msg.src, Severity.WARN, AlarmKind.UNREGISTERED_DEVICE, msg.kind.value)
            return
        self.last_seen[msg.src] = self.net.now
        self.lapsed.discard(msg.src)
        if msg.kind is MsgKind.ALARM:
            p = msg.payload
            self.record(msg.src, Severity(p.get("severity", "WARN")), AlarmKind(p["kind"]),
                        p.get("detail", ""))
            if p["kind"] in _FORWARDED and self.controller is not None:
                self.send(self.controller, MsgKind.ALARM, dict(p), msg.correlation_id)

    def check_heartbeats(self) -> list[Alarm]:
        raised = []
        limit = self.missed_heartbeats * self.heartbeat_interval
        for device in sorted(self.devices):
            if device in self.lapsed:
                continue
            if self.net.now - self.last_seen.get(device, 0.0) > limit:
                self.lapsed.add(device)
                raised.append(self.record(device, Severity.CRITICAL, AlarmKind.HEARTBEAT_LOST))
        return raised

    def alarms_since(self, t: float = 0.0) -> list[Alarm]:
        return [a for a in self.alarms if a.timestamp >= t]
