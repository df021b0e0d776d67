"""Relay ciphers (one-time pad, AES-256-GCM) for protecting key material
hop by hop, and the channel policy gate.

Wire frame of a wrapped key::

    mode(1) | nonce(12, zero for OTP) | length(4, big-endian bits) | ciphertext | tag(16)
"""

from __future__ import annotations

import hmac
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Protocol

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .domain import (AssetClass, EntityId, InsufficientKey, KeyBlock, KeyDesync, KeyRole,
                     KeyStore, Kind, Lane, Origin, OriginKind, ProtocolMessage, QkdnError,
                     join_bits)

MAC_KEY_BITS = 128
TAG_BYTES = 16
GCM_KEY_BITS = 256
NONCE_BYTES = 12
GCM_REKEY_AFTER = 1 << 20
_HEADER = struct.Struct(">B12sI")


class AuthFail(QkdnError):
    code = "AUTH_FAIL"


class NonceExhaustion(QkdnError):
    code = "NONCE_EXHAUSTION"


class Mode(str, Enum):
    OTP = "OTP"
    AES256GCM = "AES256GCM"


_MODE_BYTE = {Mode.OTP: 1, Mode.AES256GCM: 2}
_BYTE_MODE = {v: k for k, v in _MODE_BYTE.items()}


def wrap_cost(mode: Mode, plain_bits: int) -> int:
    """KMA bits a fresh wrap draws: pad + MAC key for OTP, one session key for GCM."""
    return plain_bits + MAC_KEY_BITS if Mode(mode) is Mode.OTP else GCM_KEY_BITS


@dataclass
class WrappedKey:
    mode: Mode
    nonce: bytes
    length_bits: int
    ciphertext: bytes
    auth_tag: bytes
    consumed_kma_bits: int
    key_id: str = ""
    role: KeyRole = KeyRole.KSA
    kma_refs: list[tuple[str, int, int]] = field(default_factory=list)

    def to_frame(self) -> bytes:
        return _HEADER.pack(_MODE_BYTE[self.mode], self.nonce, self.length_bits) \
            + self.ciphertext + self.auth_tag

    @classmethod
    def from_frame(cls, frame: bytes, **meta) -> WrappedKey:
        if len(frame) < _HEADER.size + TAG_BYTES:
            raise AuthFail(detail="short frame")
        mode_b, nonce, length = _HEADER.unpack_from(frame)
        if mode_b not in _BYTE_MODE:
            raise AuthFail(detail=f"unknown mode byte {mode_b}")
        body = frame[_HEADER.size:]
        ct, tag = body[:-TAG_BYTES], body[-TAG_BYTES:]
        if len(ct) * 8 != length:
            raise AuthFail(detail="length field mismatch")
        return cls(_BYTE_MODE[mode_b], nonce, length, ct, tag, meta.pop("consumed_kma_bits", 0),
                   **meta)

    def to_payload(self) -> dict:
        return {"key_id": self.key_id, "role": self.role.value, "frame": self.to_frame().hex(),
                "kma_refs": [list(r) for r in self.kma_refs]}

    @classmethod
    def from_payload(cls, data: dict) -> WrappedKey:
        try:
            frame = bytes.fromhex(data["frame"])
        except (KeyError, ValueError) as exc:
            raise AuthFail(detail="malformed frame") from exc
        return cls.from_frame(frame, key_id=data.get("key_id", ""),
                              role=KeyRole(data.get("role", "KSA")),
                              kma_refs=[tuple(r) for r in data.get("kma_refs", [])])


class KmaSource(Protocol):
    """What wrap/unwrap need from key material: draw fresh bits when sending,
    take the mirrored bits by reference when receiving."""

    def draw(self, n_bits: int, purpose: str) -> list[KeyBlock]: ...

    def take(self, refs: list[tuple[str, int, int]], purpose: str) -> list[KeyBlock]: ...


@dataclass
class _GcmSession:
    key: bytes
    refs: list[tuple[str, int, int]]
    counter: int = 0
    seen: set[bytes] = field(default_factory=set)


class KeyChannel:
    """Pool handle for one side of a KMA-keyed link (store + peer), carrying
    the GCM session state for both directions."""

    def __init__(self, store: KeyStore, peer: EntityId, rekey_after: int = GCM_REKEY_AFTER) -> None:
        self.store = store
        self.peer = peer
        self.rekey_after = rekey_after
        self.tx_session: _GcmSession | None = None
        self.rx_sessions: dict[tuple, _GcmSession] = {}

    def draw(self, n_bits: int, purpose: str = "wrap") -> list[KeyBlock]:
        return self.store.consume(self.peer, n_bits, Lane.TX, purpose)

    def take(self, refs: list[tuple[str, int, int]], purpose: str = "unwrap") -> list[KeyBlock]:
        return self.store.take(self.peer, refs, Lane.RX, purpose)

    def available_bits(self) -> int:
        return self.store.pool_bits(self.peer, Lane.TX)


class SessionKeyChannel:
    """Material for one exchange between two access KMSs: the relayed session
    key is spent first, then a backing pool covers whatever the wrap still needs.

    The session key sits in ``session_store`` (TX lane at the generating end,
    RX lane at the receiving end) so its consumption is audited like any pool.
    """

    def __init__(self, session_store: KeyStore, peer: EntityId, session_root: str,
                 session_bits: int, backing: KeyChannel) -> None:
        self.session_store = session_store
        self.peer = peer
        self.session_root = session_root
        self.backing = backing
        self.rekey_after = GCM_REKEY_AFTER
        self.tx_session: _GcmSession | None = None
        self.rx_sessions: dict[tuple, _GcmSession] = {}
        self._offset = 0
        self._left = session_bits

    def draw(self, n_bits: int, purpose: str = "wrap") -> list[KeyBlock]:
        head = min(n_bits, self._left)
        blocks: list[KeyBlock] = []
        if head:
            blocks = self.session_store.take(self.peer, [(self.session_root, self._offset, head)],
                                             Lane.TX, purpose)
            self._offset += head
            self._left -= head
        if n_bits - head:
            blocks += self.backing.draw(n_bits - head, purpose)
        return blocks

    def take(self, refs: list[tuple[str, int, int]], purpose: str = "unwrap") -> list[KeyBlock]:
        out: list[KeyBlock] = []
        for ref in refs:
            if ref[0] == self.session_root:
                out += self.session_store.take(self.peer, [ref], Lane.RX, purpose)
            else:
                out += self.backing.take([ref], purpose)
        return out


def _refs(blocks: Iterable[KeyBlock]) -> list[tuple[str, int, int]]:
    return [b.ref() for b in blocks]


def _aad(header: bytes, key_id: str, role: KeyRole, extra: bytes) -> bytes:
    return header + key_id.encode() + b"|" + role.value.encode() + b"|" + extra


def _otp_tag(mac_key: bytes, aad: bytes, ct: bytes, plain: bytes) -> bytes:
    # Tag covers plaintext too, so a wrong pad is caught as well as a flipped bit.
    return hmac.digest(mac_key, aad + ct + plain, "sha256")[:TAG_BYTES]


def _xor(a: bytes, b: bytes) -> bytes:
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(len(a), "big")


def wrap(plain: KeyBlock, kma: KmaSource, mode: Mode | str = Mode.OTP, aad: bytes = b"") -> WrappedKey:
    mode = Mode(mode)
    length = plain.n_bits
    if mode is Mode.OTP:
        material = join_bits(blocks := kma.draw(wrap_cost(mode, length), "otp-wrap"))
        mac_key, pad = material[:MAC_KEY_BITS // 8], material[MAC_KEY_BITS // 8:]
        nonce = b"\x00" * NONCE_BYTES
        header = _HEADER.pack(_MODE_BYTE[mode], nonce, length)
        ct = _xor(plain.bits, pad)
        tag = _otp_tag(mac_key, _aad(header, plain.key_id, plain.role, aad), ct, plain.bits)
        return WrappedKey(mode, nonce, length, ct, tag, wrap_cost(mode, length), plain.key_id,
                          plain.role, _refs(blocks))
    session = kma.tx_session
    consumed = 0
    if session is None or session.counter >= kma.rekey_after:
        if session is not None and kma.rekey_after <= 0:
            raise NonceExhaustion()
        blocks = kma.draw(GCM_KEY_BITS, "gcm-session")
        session = kma.tx_session = _GcmSession(join_bits(blocks), _refs(blocks))
        consumed = GCM_KEY_BITS
    if session.counter >= (1 << 64):
        raise NonceExhaustion()
    nonce = session.counter.to_bytes(NONCE_BYTES, "big")
    session.counter += 1
    header = _HEADER.pack(_MODE_BYTE[mode], nonce, length)
    sealed = AESGCM(session.key).encrypt(nonce, plain.bits,
                                         _aad(header, plain.key_id, plain.role, aad))
    return WrappedKey(mode, nonce, length, sealed[:-TAG_BYTES], sealed[-TAG_BYTES:], consumed,
                      plain.key_id, plain.role, list(session.refs))


def unwrap(w: WrappedKey, kma: KmaSource, aad: bytes = b"", *, created_at: float = 0.0) -> KeyBlock:
    """Verify and decrypt; any authentication or material mismatch is AUTH_FAIL."""
    header = _HEADER.pack(_MODE_BYTE[w.mode], w.nonce, w.length_bits)
    full_aad = _aad(header, w.key_id, w.role, aad)
    if w.mode is Mode.OTP:
        need = wrap_cost(Mode.OTP, w.length_bits)
        if sum(r[2] for r in w.kma_refs) != need:
            raise AuthFail(detail="reference length mismatch")
        try:
            material = join_bits(kma.take(w.kma_refs, "otp-unwrap"))
        except (KeyDesync, InsufficientKey) as exc:
            raise AuthFail(detail=str(exc)) from exc
        mac_key, pad = material[:MAC_KEY_BITS // 8], material[MAC_KEY_BITS // 8:]
        plain = _xor(w.ciphertext, pad)
        if not hmac.compare_digest(_otp_tag(mac_key, full_aad, w.ciphertext, plain), w.auth_tag):
            raise AuthFail(detail="OTP tag mismatch")
    else:
        session_key = tuple(tuple(r) for r in w.kma_refs)
        session = kma.rx_sessions.get(session_key)
        if session is None:
            try:
                blocks = kma.take(list(w.kma_refs), "gcm-session")
            except (KeyDesync, InsufficientKey) as exc:
                raise AuthFail(detail=str(exc)) from exc
            session = kma.rx_sessions[session_key] = _GcmSession(join_bits(blocks), list(w.kma_refs))
        if w.nonce in session.seen:
            raise AuthFail(detail="replayed nonce")
        try:
            plain = AESGCM(session.key).decrypt(w.nonce, w.ciphertext + w.auth_tag, full_aad)
        except InvalidTag as exc:
            raise AuthFail(detail="GCM tag mismatch") from exc
        session.seen.add(w.nonce)
    return KeyBlock(w.key_id, plain, Origin(OriginKind.LOCAL_RNG), w.role, created_at)


# -- channel policy ---------------------------------------------------------

class Property(str, Enum):
    CONFIDENTIALITY = "CONFIDENTIALITY"
    INTEGRITY = "INTEGRITY"
    AUTHENTICITY = "AUTHENTICITY"


CIA = frozenset(Property)
IA = frozenset({Property.INTEGRITY, Property.AUTHENTICITY})

REQUIRED = {
    AssetClass.KEY_DATA: CIA,
    AssetClass.META_DATA: CIA,
    AssetClass.CONTROL_MGMT: IA,
    AssetClass.USER_PROFILE: CIA,
}

_USER_SIDE = {Kind.SAE, Kind.UKMS}
_USER_ALLOWED = {frozenset({Kind.SAE, Kind.UKMS}), frozenset({Kind.UKMS, Kind.AKMS})}
_FORBIDDEN = {frozenset({Kind.AKMS, Kind.CONTROLLER})}


@dataclass(frozen=True)
class ChannelSpec:
    a: EntityId
    b: EntityId
    classes: frozenset[AssetClass]
    security: frozenset[Property]
    intra_node: bool = False
    latency_ms: float = 5.0
    latency_std_ms: float = 0.0

    @property
    def key(self) -> frozenset[EntityId]:
        return frozenset({self.a, self.b})

    @property
    def channel_id(self) -> str:
        x, y = sorted((self.a, self.b))
        return f"{x}<->{y}"


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.allowed


ALLOW = Decision(True)


def forbidden_pair(x: EntityId, y: EntityId) -> bool:
    kinds = frozenset({x.kind, y.kind})
    if kinds in _FORBIDDEN:
        return True
    if (x.kind in _USER_SIDE or y.kind in _USER_SIDE) and kinds not in _USER_ALLOWED:
        return True
    return False


def required_properties(asset_class: AssetClass, channel: ChannelSpec) -> frozenset[Property]:
    # Co-located AKMS/CKMS: confidentiality is not a prerequisite inside a node.
    if channel.intra_node:
        return IA
    return REQUIRED[asset_class]


def enforce_policy(msg: ProtocolMessage, channel: ChannelSpec | None) -> Decision:
    """Allow or deny one message on one channel; never raises."""
    if forbidden_pair(msg.src, msg.dst):
        return Decision(False, "FORBIDDEN_CHANNEL")
    if channel is None:
        return Decision(False, "UNREGISTERED_CHANNEL")
    if channel.key != frozenset({msg.src, msg.dst}):
        return Decision(False, "WRONG_CHANNEL")
    if msg.asset_class not in channel.classes:
        return Decision(False, "CLASS_NOT_PERMITTED")
    if not required_properties(msg.asset_class, channel) <= channel.security:
        return Decision(False, "INSUFFICIENT_PROTECTION")
    return ALLOW


class ChannelRegistry:
    """All registered channels; lookups by unordered endpoint pair."""

    def __init__(self, channels: Iterable[ChannelSpec] = ()) -> None:
        self._by_key: dict[frozenset, ChannelSpec] = {}
        for ch in channels:
            self.add(ch)

    def add(self, ch: ChannelSpec) -> None:
        self._by_key[ch.key] = ch

    def get(self, x: EntityId, y: EntityId) -> ChannelSpec | None:
        return self._by_key.get(frozenset({x, y}))

    def __iter__(self):
        return iter(sorted(self._by_key.values(), key=lambda c: c.channel_id))

    def __len__(self) -> int:
        return len(self._by_key)

    def check(self, msg: ProtocolMessage) -> Decision:
        return enforce_policy(msg, self.get(msg.src, msg.dst))
