"""Shared plumbing for protocol components: message dispatch and alarms."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any

from .domain import EntityId, MsgKind, ProtocolMessage

log = logging.getLogger(__name__)


class Severity(str, Enum):
    INFO = "INFO"
    WARN = "WARN"
    CRITICAL = "CRITICAL"


class AlarmKind(str, Enum):
    LINK_DOWN = "LINK_DOWN"
    LINK_UP = "LINK_UP"
    RNG_DEGRADED = "RNG_DEGRADED"
    AUTH_FAIL = "AUTH_FAIL"
    KEY_STARVATION = "KEY_STARVATION"
    POLICY_DENY = "POLICY_DENY"
    HEARTBEAT_LOST = "HEARTBEAT_LOST"
    UNREGISTERED_DEVICE = "UNREGISTERED_DEVICE"
    UNKNOWN_SENDER = "UNKNOWN_SENDER"
    CORRELATION_MISMATCH = "CORRELATION_MISMATCH"
    NO_SUCH_EXCHANGE = "NO_SUCH_EXCHANGE"
    INSTALL_TIMEOUT = "INSTALL_TIMEOUT"


@dataclass(frozen=True)
class Alarm:
    timestamp: float
    source: EntityId
    severity: Severity
    kind: AlarmKind
    detail: str = ""

    def row(self) -> list[str]:
        return [f"{self.timestamp:.6f}", str(self.source), self.severity.value, self.kind.value]

    def to_dict(self) -> dict[str, Any]:
        return {"timestamp": self.timestamp, "source": str(self.source),
                "severity": self.severity.value, "kind": self.kind.value, "detail": self.detail}


class Actor:
    """A component reachable on the transport. Inbound messages dispatch to
    ``on_<kind>`` methods; unknown kinds are ignored and logged."""

    def __init__(self, eid: EntityId, net, manager: EntityId | None = None) -> None:
        self.eid = eid
        self.net = net
        self.manager = manager
        self.local_alarms: list[Alarm] = []
        net.register(eid, self.receive)

    def send(self, dst: EntityId, kind: MsgKind, payload: dict | None = None,
             correlation_id: str = ""):
        return self.net.send(self.net.message(self.eid, dst, kind, payload, correlation_id))

    def receive(self, msg: ProtocolMessage) -> None:
        handler = getattr(self, "on_" + msg.kind.value.lower(), None)
        if handler is None:
            log.debug("%s ignores %s from %s", self.eid, msg.kind.value, msg.src)
            return
        handler(msg)

    def alarm(self, kind: AlarmKind, severity: Severity = Severity.WARN, detail: str = "") -> None:
        if self.manager is not None:
            receipt = self.send(self.manager, MsgKind.ALARM,
                                {"kind": kind.value, "severity": severity.value, "detail": detail})
            if receipt:
                return
        self.local_alarms.append(Alarm(self.net.now, self.eid, severity, kind, detail))

    def heartbeat(self) -> None:
        if self.manager is not None:
            self.send(self.manager, MsgKind.HEARTBEAT, {})

    def error(self, dst: EntityId, reason: str, correlation_id: str, **extra: Any):
        return self.send(dst, MsgKind.ERROR, {"reason": reason, **extra}, correlation_id)
