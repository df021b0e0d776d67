"""Access-node KMS: the gateway between user and carrier domains.

The initiator validates with AAA and peers with the responder; the responder
generates the relay session key (QBN) and the end-to-end keys (KSA), as in
the reference message sequence.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

from .actor import Actor, AlarmKind, Severity
from .crypto_relay import (AuthFail, KeyChannel, Mode, SessionKeyChannel, WrappedKey, unwrap,
                           wrap)
from .domain import (EntityId, IdSource, InsufficientKey, KeyBlock, KeyRole, KeyStore, Lane,
                     LOCAL_RNG, MsgKind, ProtocolMessage, QkdnError, eid)
from .rng import Health, HybridRng

log = logging.getLogger(__name__)


class SessionState(str, Enum):
    VALIDATING = "VALIDATING"
    PEERED = "PEERED"
    QBN_IN_FLIGHT = "QBN_IN_FLIGHT"
    SECURED = "SECURED"
    KSA_SENT = "KSA_SENT"
    DONE = "DONE"
    FAILED = "FAILED"


_NEXT = {
    SessionState.VALIDATING: SessionState.PEERED,
    SessionState.PEERED: SessionState.QBN_IN_FLIGHT,
    SessionState.QBN_IN_FLIGHT: SessionState.SECURED,
    SessionState.SECURED: SessionState.KSA_SENT,
    SessionState.KSA_SENT: SessionState.DONE,
}
TERMINAL = {SessionState.DONE, SessionState.FAILED}


class IllegalTransition(QkdnError):
    code = "ILLEGAL_TRANSITION"


def legal(src: SessionState, dst: SessionState) -> bool:
    if src in TERMINAL:
        return False
    return dst is SessionState.FAILED or _NEXT.get(src) is dst


# Exactly what a peer-init may carry; service properties stay with the initiator.
PEER_INIT_FIELDS = frozenset({"number", "size_bits", "master_sae", "slave_sae", "ukms_b",
                              "dest_ckms"})


@dataclass
class PeerSession:
    correlation_id: str
    local: EntityId
    remote: EntityId | None
    initiator: bool
    number: int
    size_bits: int
    master_sae: EntityId
    slave_sae: EntityId
    local_ukms: EntityId
    remote_ukms: EntityId | None = None
    entry_ckms: EntityId | None = None
    dest_ckms: EntityId | None = None
    account: str = ""
    state: SessionState = SessionState.VALIDATING
    reason: str = ""
    history: list[SessionState] = field(default_factory=list)
    qbn_root: str = ""
    qbn_bits: int = 0
    key_ids: list[str] = field(default_factory=list)
    validated: bool = False
    pushed_ukms: bool = False
    remote_engaged: bool = False
    awaiting: MsgKind | None = None
    attempt: int = 0
    timers: list = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        self.history.append(self.state)

    def advance(self, dst: SessionState) -> None:
        if not legal(self.state, dst):
            raise IllegalTransition(detail=f"{self.state.value} -> {dst.value}")
        self.state = dst
        self.history.append(dst)

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL


class Akms(Actor):
    def __init__(self, eid_: EntityId, net, *, ckms: EntityId, aaa: EntityId, rng: HybridRng,
                 ukms_channels: dict[EntityId, KeyChannel],
                 peer_channels: dict[EntityId, KeyChannel], session_store: KeyStore,
                 ukms_mode: Mode | str = Mode.AES256GCM, peer_mode: Mode | str = Mode.OTP,
                 manager: EntityId | None = None, max_sessions: int = 1024, retries: int = 3,
                 retry_base: float = 0.2, session_timeout: float = 60.0,
                 ids: IdSource | None = None) -> None:
        super().__init__(eid_, net, manager)
        self.ckms = ckms
        self.aaa = aaa
        self.rng = rng
        self.ukms_channels = ukms_channels
        self.peer_channels = peer_channels
        self.session_store = session_store
        self.ukms_mode = Mode(ukms_mode)
        self.peer_mode = Mode(peer_mode)
        self.max_sessions = max_sessions
        self.retries = retries
        self.retry_base = retry_base
        self.session_timeout = session_timeout
        self.ids = ids or IdSource()
        self.sessions: dict[str, PeerSession] = {}
        self._channels: dict[str, SessionKeyChannel] = {}
        self._rng_alarmed = False
        self.ksa_log: list[tuple[str, str, bytes]] = []
        self.keep_ksa_log = False

    # -- helpers ----------------------------------------------------------------
    def active_sessions(self) -> int:
        return sum(1 for s in self.sessions.values() if not s.terminal)

    def _arm_timeout(self, s: PeerSession) -> None:
        def expire() -> None:
            if not s.terminal:
                self.fail(s, "TIMEOUT")
        s.timers.append(self.net.schedule(self.session_timeout, expire))

    def _finish(self, s: PeerSession) -> None:
        for t in s.timers:
            t.cancel()
        s.timers.clear()
        self._channels.pop(s.correlation_id, None)

    def _generate(self, n_bits: int, role: KeyRole) -> KeyBlock:
        bits = self.rng.generate(n_bits)
        if self.rng.health is Health.DEGRADED and not self._rng_alarmed:
            self._rng_alarmed = True
            self.alarm(AlarmKind.RNG_DEGRADED, Severity.CRITICAL)
        return KeyBlock(self.ids.new(), bits, LOCAL_RNG, role, self.net.now)

    def _rpc(self, s: PeerSession, dst: EntityId, kind: MsgKind, payload: dict,
             reply: MsgKind, failure: str) -> None:
        """Send with retries: up to ``retries`` resends, backoff doubling from
        ``retry_base`` seconds of simulated time."""
        s.awaiting = reply
        s.attempt = 0

        def attempt() -> None:
            if s.terminal or s.awaiting is not reply:
                return
            if s.attempt > self.retries:
                self.fail(s, failure)
                return
            self.send(dst, kind, payload, s.correlation_id)
            delay = self.retry_base * (2 ** s.attempt)
            s.attempt += 1
            s.timers.append(self.net.schedule(delay, attempt))

        attempt()

    def fail(self, s: PeerSession, reason: str, *, notify_remote: bool = True,
             local: bool = True) -> None:
        if s.terminal:
            return
        s.advance(SessionState.FAILED)
        s.reason = reason
        s.awaiting = None
        self._finish(s)
        # only the device that saw the fault raises the alarm, not those told about it
        if local and reason in ("KEY_STARVATION", "AUTH_FAIL"):
            self.alarm(AlarmKind(reason), detail=s.correlation_id)
        if s.initiator:
            self.error(s.local_ukms, reason, s.correlation_id)
            if s.validated:
                self.send(self.aaa, MsgKind.ACCOUNTING,
                          {"account_id": s.account, "keys": 0, "bits": 0, "outcome": "FAILED",
                           "reason": reason}, s.correlation_id)
        elif s.pushed_ukms:
            self.error(s.local_ukms, reason, s.correlation_id)
        if notify_remote and s.remote is not None and s.remote_engaged:
            self.error(s.remote, reason, s.correlation_id)

    def _session(self, msg: ProtocolMessage, *expected: SessionState) -> PeerSession | None:
        s = self.sessions.get(msg.correlation_id)
        if s is None or s.state not in expected:
            if msg.kind is not MsgKind.ERROR:
                self.alarm(AlarmKind.CORRELATION_MISMATCH,
                           detail=f"{msg.kind.value} {msg.correlation_id}")
            return None
        return s

    # -- initiator: validation and peering --------------------------------------
    def on_enriched_request(self, msg: ProtocolMessage) -> None:
        corr = msg.correlation_id
        if corr in self.sessions:
            return
        p = msg.payload
        inner = p["request"]
        s = PeerSession(corr, self.eid, None, True, int(inner["number"]), int(inner["size_bits"]),
                        eid(inner["master_sae"]), eid(inner["slave_sae"]), msg.src,
                        dest_ckms=self.ckms, account=p.get("user_account", ""))
        self.sessions[corr] = s
        if self.active_sessions() > self.max_sessions:
            self.fail(s, "BUSY")
            return
        self._arm_timeout(s)
        self.validate_with_aaa(s, p)

    def validate_with_aaa(self, s: PeerSession, enriched: dict) -> None:
        self._rpc(s, self.aaa, MsgKind.VALIDATE, enriched, MsgKind.SERVICE_PROPERTIES,
                  "AAA_TIMEOUT")

    def on_service_properties(self, msg: ProtocolMessage) -> None:
        s = self._session(msg, SessionState.VALIDATING)
        if s is None or s.awaiting is not MsgKind.SERVICE_PROPERTIES:
            return
        s.awaiting = None
        p = msg.payload
        if not p.get("ok"):
            # AAA has already written the rejection record.
            self.fail(s, p.get("reason", "AAA_REJECT"))
            return
        s.validated = True
        props = p["properties"]
        s.remote = eid(props["peer_akms"])
        s.remote_ukms = eid(props["peer_ukms"])
        if s.remote == self.eid:
            self.fail(s, "LOCAL_PEER_UNSUPPORTED")
            return
        self.peer_init(s)

    def peer_init(self, s: PeerSession) -> None:
        payload = {"number": s.number, "size_bits": s.size_bits, "master_sae": str(s.master_sae),
                   "slave_sae": str(s.slave_sae), "ukms_b": str(s.remote_ukms),
                   "dest_ckms": str(s.dest_ckms)}
        s.remote_engaged = True
        self._rpc(s, s.remote, MsgKind.PEER_INIT, payload, MsgKind.PEER_ACK, "PEER_UNREACHABLE")

    def on_peer_ack(self, msg: ProtocolMessage) -> None:
        s = self._session(msg, SessionState.VALIDATING)
        if s is None or s.awaiting is not MsgKind.PEER_ACK:
            return
        s.awaiting = None
        s.entry_ckms = eid(msg.payload["entry_ckms"])
        s.advance(SessionState.PEERED)
        s.advance(SessionState.QBN_IN_FLIGHT)

    # -- responder --------------------------------------------------------------
    def on_peer_init(self, msg: ProtocolMessage) -> None:
        corr = msg.correlation_id
        p = msg.payload
        existing = self.sessions.get(corr)
        if existing is not None:
            if not existing.initiator and not existing.terminal:
                self.send(msg.src, MsgKind.PEER_ACK, {"entry_ckms": str(self.ckms)}, corr)
            return
        if set(p) != PEER_INIT_FIELDS:
            self.error(msg.src, "SCHEMA_VIOLATION", corr)
            return
        if self.active_sessions() >= self.max_sessions:
            self.error(msg.src, "PEER_BUSY", corr)
            return
        try:
            s = PeerSession(corr, self.eid, msg.src, False, int(p["number"]), int(p["size_bits"]),
                            eid(p["master_sae"]), eid(p["slave_sae"]), eid(p["ukms_b"]),
                            entry_ckms=self.ckms, dest_ckms=eid(p["dest_ckms"]),
                            state=SessionState.PEERED)
        except (ValueError, KeyError):
            self.error(msg.src, "SCHEMA_VIOLATION", corr)
            return
        if s.local_ukms not in self.ukms_channels:
            self.error(msg.src, "UNKNOWN_SAE", corr)
            return
        s.remote_engaged = True
        self.sessions[corr] = s
        self._arm_timeout(s)
        self.send(msg.src, MsgKind.PEER_ACK, {"entry_ckms": str(self.ckms)}, corr)
        self.generate_and_send_qbn(s)

    def qbn_size(self, s: PeerSession) -> int:
        if self.peer_mode is Mode.OTP:
            return s.number * s.size_bits
        return 256

    def generate_and_send_qbn(self, s: PeerSession) -> None:
        qbn = self._generate(self.qbn_size(s), KeyRole.QBN)
        s.qbn_root, s.qbn_bits = qbn.key_id, qbn.n_bits
        self.session_store.refill(s.remote, KeyBlock(qbn.key_id, qbn.bits, qbn.origin,
                                                     KeyRole.QBN, qbn.created_at), Lane.TX)
        s.advance(SessionState.QBN_IN_FLIGHT)
        # Intra-node hand-off: plaintext over the integrity-protected local channel.
        self.send(self.ckms, MsgKind.QBN_RELAY,
                  {"dest": str(s.dest_ckms), "hop_count": 0,
                   "qbn": {"key_id": qbn.key_id, "bits": qbn.bits.hex()}}, s.correlation_id)

    # -- initiator: QBN arrival -------------------------------------------------
    def on_qbn_relay(self, msg: ProtocolMessage) -> None:
        s = self._session(msg, SessionState.QBN_IN_FLIGHT)
        if s is None or not s.initiator:
            return
        q = msg.payload["qbn"]
        block = KeyBlock(q["key_id"], bytes.fromhex(q["bits"]), LOCAL_RNG, KeyRole.QBN,
                         self.net.now)
        self.on_qbn_arrived(s, block)

    def on_qbn_arrived(self, s: PeerSession, qbn: KeyBlock) -> None:
        s.qbn_root, s.qbn_bits = qbn.key_id, qbn.n_bits
        self.session_store.refill(s.remote, qbn, Lane.RX)
        s.advance(SessionState.SECURED)
        self.send(s.remote, MsgKind.QBN_ACK, {}, s.correlation_id)

    def _session_channel(self, s: PeerSession) -> SessionKeyChannel:
        chan = self._channels.get(s.correlation_id)
        if chan is None:
            chan = self._channels[s.correlation_id] = SessionKeyChannel(
                self.session_store, s.remote, s.qbn_root, s.qbn_bits, self.peer_channels[s.remote])
        return chan

    # -- responder: KSA generation ------------------------------------------------
    def on_qbn_ack(self, msg: ProtocolMessage) -> None:
        s = self._session(msg, SessionState.QBN_IN_FLIGHT)
        if s is None or s.initiator:
            return
        s.advance(SessionState.SECURED)
        self.generate_and_send_ksa(s)

    def generate_and_send_ksa(self, s: PeerSession) -> None:
        keys = [self._generate(s.size_bits, KeyRole.KSA) for _ in range(s.number)]
        try:
            to_peer = [wrap(k, self._session_channel(s), self.peer_mode) for k in keys]
            to_ukms = [wrap(k, self.ukms_channels[s.local_ukms], self.ukms_mode) for k in keys]
        except InsufficientKey:
            self.fail(s, "KEY_STARVATION")
            return
        self._log_ksa(s, keys)
        s.key_ids = [k.key_id for k in keys]
        self.send(s.remote, MsgKind.KSA_TRANSFER, {"keys": [w.to_payload() for w in to_peer]},
                  s.correlation_id)
        self._push(s, to_ukms)

    def _push(self, s: PeerSession, wrapped: list[WrappedKey]) -> None:
        s.pushed_ukms = True
        s.advance(SessionState.KSA_SENT)
        self.send(s.local_ukms, MsgKind.KSA_PUSH,
                  {"keys": [w.to_payload() for w in wrapped], "master_sae": str(s.master_sae),
                   "slave_sae": str(s.slave_sae), "number": s.number, "size_bits": s.size_bits},
                  s.correlation_id)

    def _log_ksa(self, s: PeerSession, keys: list[KeyBlock]) -> None:
        if self.keep_ksa_log:
            self.ksa_log.extend((s.correlation_id, k.key_id, k.bits) for k in keys)

    # -- initiator: KSA arrival ---------------------------------------------------
    def on_ksa_transfer(self, msg: ProtocolMessage) -> None:
        s = self._session(msg, SessionState.SECURED)
        if s is None or not s.initiator:
            return
        try:
            wrapped = [WrappedKey.from_payload(w) for w in msg.payload.get("keys", [])]
            keys = [unwrap(w, self._session_channel(s), created_at=self.net.now) for w in wrapped]
            if len(keys) != s.number or any(k.n_bits != s.size_bits for k in keys):
                raise AuthFail(detail="key count or size mismatch")
        except AuthFail:
            self.fail(s, "AUTH_FAIL")
            return
        try:
            to_ukms = [wrap(k, self.ukms_channels[s.local_ukms], self.ukms_mode) for k in keys]
        except InsufficientKey:
            self.fail(s, "KEY_STARVATION")
            return
        self._log_ksa(s, keys)
        s.key_ids = [k.key_id for k in keys]
        self._push(s, to_ukms)

    def on_ksa_ack(self, msg: ProtocolMessage) -> None:
        s = self._session(msg, SessionState.KSA_SENT)
        if s is None or msg.src != s.local_ukms:
            return
        s.advance(SessionState.DONE)
        self._finish(s)
        if s.initiator:
            self.send(self.aaa, MsgKind.ACCOUNTING,
                      {"account_id": s.account, "keys": s.number, "bits": s.number * s.size_bits,
                       "outcome": "DELIVERED"}, s.correlation_id)

    def on_error(self, msg: ProtocolMessage) -> None:
        s = self.sessions.get(msg.correlation_id)
        if s is None:
            return
        reason = msg.payload.get("reason", "FAILED")
        from_remote = msg.src == s.remote
        if s.state is SessionState.DONE and not s.initiator and from_remote:
            # The initiator side failed after our UKMS took the keys: revoke them.
            self.error(s.local_ukms, reason, s.correlation_id)
            return
        if s.terminal:
            return
        self.fail(s, reason, notify_remote=not from_remote, local=False)
