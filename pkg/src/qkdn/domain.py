"""Core vocabulary shared by every component: identities, key material,
key pools, message envelopes and asset classification."""

from __future__ import annotations

import threading
import uuid
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Iterator

DEFAULT_KEY_BITS = 256

# Namespace for ids of split remainders; both link endpoints derive the same id.
_SPLIT_NS = uuid.UUID("6f1c9f0e-3b1a-4c55-9a7e-2f4b8d1e0c11")


class QkdnError(Exception):
    """Protocol-level failure carrying a stable reason code."""

    code = "ERROR"

    def __init__(self, code: str | None = None, detail: str = "") -> None:
        if code is not None:
            self.code = code
        self.detail = detail
        super().__init__(f"{self.code}: {detail}" if detail else self.code)


class EmptyMaterial(QkdnError):
    code = "EMPTY_MATERIAL"


class InsufficientKey(QkdnError):
    code = "INSUFFICIENT_KEY"


class CapacityExceeded(QkdnError):
    code = "CAPACITY_EXCEEDED"


class KeyDesync(QkdnError):
    code = "KEY_DESYNC"


class Kind(str, Enum):
    SAE = "SAE"
    UKMS = "UKMS"
    AKMS = "AKMS"
    CKMS = "CKMS"
    QKD_MODULE = "QKD_MODULE"
    CONTROLLER = "CONTROLLER"
    MANAGER = "MANAGER"
    AAA = "AAA"


@dataclass(frozen=True, order=True)
class EntityId:
    kind: Kind
    name: str

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("entity name must be non-empty")
        object.__setattr__(self, "kind", Kind(self.kind))

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.name}"

    @classmethod
    def parse(cls, text: str) -> EntityId:
        kind, _, name = text.partition(":")
        return cls(Kind(kind), name)


def eid(text: str) -> EntityId:
    return EntityId.parse(text)


class OriginKind(str, Enum):
    QKD_LINK = "QKD_LINK"
    LOCAL_RNG = "LOCAL_RNG"
    PRESHARED = "PRESHARED"


@dataclass(frozen=True)
class Origin:
    kind: OriginKind
    link_id: str | None = None

    @classmethod
    def link(cls, link_id: str) -> Origin:
        return cls(OriginKind.QKD_LINK, link_id)


LOCAL_RNG = Origin(OriginKind.LOCAL_RNG)


class KeyRole(str, Enum):
    KMA = "KMA"
    QBN = "QBN"
    KSA = "KSA"


def split_key_id(root_id: str, offset_bits: int) -> str:
    """Id of the fragment of ``root_id`` starting at ``offset_bits``."""
    if offset_bits == 0:
        return root_id
    return str(uuid.uuid5(_SPLIT_NS, f"{root_id}+{offset_bits}"))


@dataclass(eq=False)
class KeyBlock:
    key_id: str
    bits: bytes
    origin: Origin
    role: KeyRole
    created_at: float = 0.0
    root_id: str = ""
    offset: int = 0
    consumed: bool = False

    def __post_init__(self) -> None:
        if not self.bits:
            raise EmptyMaterial(detail="key block needs at least one octet")
        if not self.root_id:
            self.root_id = self.key_id

    @property
    def n_bits(self) -> int:
        return len(self.bits) * 8

    def mark_consumed(self) -> None:
        if self.consumed:
            raise QkdnError("KEY_REUSE", self.key_id)
        self.consumed = True

    def split(self, head_bits: int) -> tuple[KeyBlock, KeyBlock]:
        """Cut into a head of ``head_bits`` and a remainder with a derived id."""
        if head_bits % 8 or not 0 < head_bits < self.n_bits:
            raise ValueError(f"cannot split {self.n_bits}-bit block at {head_bits}")
        cut = head_bits // 8
        head = KeyBlock(self.key_id, self.bits[:cut], self.origin, self.role,
                        self.created_at, self.root_id, self.offset)
        tail_offset = self.offset + head_bits
        tail = KeyBlock(split_key_id(self.root_id, tail_offset), self.bits[cut:], self.origin,
                        self.role, self.created_at, self.root_id, tail_offset)
        return head, tail

    def ref(self) -> tuple[str, int, int]:
        return (self.root_id, self.offset, self.n_bits)


class IdSource:
    """Deterministic 128-bit identifier source (ids are not secret)."""

    def __init__(self, seed: int | None = None) -> None:
        import random

        self._rng = random.Random(seed)
        self._lock = threading.Lock()

    def new(self) -> str:
        with self._lock:
            return str(uuid.UUID(int=self._rng.getrandbits(128), version=4))


_default_ids = IdSource()


def new_key_block(bits: bytes, origin: Origin = LOCAL_RNG, role: KeyRole = KeyRole.KMA,
                  *, created_at: float = 0.0, key_id: str | None = None,
                  ids: IdSource | None = None) -> KeyBlock:
    if not bits:
        raise EmptyMaterial(detail="zero-length key material")
    key_id = key_id or (ids or _default_ids).new()
    return KeyBlock(key_id, bytes(bits), origin, role, created_at)


class Lane(str, Enum):
    """Which side of a link may spend a block: TX blocks are ours to send with,
    RX blocks mirror the peer's TX blocks and are only taken by reference."""

    TX = "TX"
    RX = "RX"


@dataclass
class PoolCounters:
    refilled_bits: int = 0
    consumed_bits: int = 0
    dropped_bits: int = 0
    dropped_blocks: int = 0


@dataclass(frozen=True)
class ConsumeRecord:
    peer: EntityId
    lane: Lane
    root_id: str
    offset: int
    n_bits: int
    purpose: str


class KeyStore:
    """Per-peer FIFO pools of unconsumed key blocks.

    Every mutation runs under one lock, so callers on different threads see
    consume/refill/take as atomic.
    """

    def __init__(self, owner: EntityId, capacity_bits: int = 1 << 24,
                 low_watermark_bits: int = 0) -> None:
        self.owner = owner
        self.capacity_bits = capacity_bits
        self.low_watermark_bits = low_watermark_bits
        self.pools: dict[EntityId, dict[Lane, deque[KeyBlock]]] = {}
        self.counters: dict[EntityId, PoolCounters] = {}
        self.audit: list[ConsumeRecord] = []
        self._bits: dict[tuple[EntityId, Lane], int] = {}
        self._lock = threading.RLock()
        self.listeners: list[Callable[[EntityId, int], None]] = []

    def _pool(self, peer: EntityId) -> dict[Lane, deque[KeyBlock]]:
        pool = self.pools.get(peer)
        if pool is None:
            pool = self.pools[peer] = {Lane.TX: deque(), Lane.RX: deque()}
            self.counters[peer] = PoolCounters()
            self._bits[(peer, Lane.TX)] = 0
            self._bits[(peer, Lane.RX)] = 0
        return pool

    def peers(self) -> list[EntityId]:
        return sorted(self.pools)

    def pool_bits(self, peer: EntityId, lane: Lane | None = None) -> int:
        with self._lock:
            self._pool(peer)
            if lane is None:
                return self._bits[(peer, Lane.TX)] + self._bits[(peer, Lane.RX)]
            return self._bits[(peer, lane)]

    def below_watermark(self, peer: EntityId) -> bool:
        return self.pool_bits(peer) < self.low_watermark_bits

    def blocks(self, peer: EntityId, lane: Lane = Lane.TX) -> list[KeyBlock]:
        with self._lock:
            return list(self._pool(peer)[lane])

    def has_room(self, peer: EntityId, n_bits: int) -> bool:
        return self.pool_bits(peer) + n_bits <= self.capacity_bits

    def refill(self, peer: EntityId, block: KeyBlock, lane: Lane = Lane.TX) -> None:
        if block.consumed:
            raise QkdnError("CONSUMED_BLOCK", block.key_id)
        with self._lock:
            pool = self._pool(peer)
            counters = self.counters[peer]
            if self.pool_bits(peer) + block.n_bits > self.capacity_bits:
                counters.dropped_blocks += 1
                counters.dropped_bits += block.n_bits
                raise CapacityExceeded(detail=f"{self.owner} pool for {peer} full")
            pool[lane].append(block)
            self._bits[(peer, lane)] += block.n_bits
            counters.refilled_bits += block.n_bits
        for listener in self.listeners:
            listener(peer, block.n_bits)

    def record_drop(self, peer: EntityId, n_bits: int) -> None:
        with self._lock:
            self._pool(peer)
            self.counters[peer].dropped_blocks += 1
            self.counters[peer].dropped_bits += n_bits

    def consume(self, peer: EntityId, n_bits: int, lane: Lane = Lane.TX,
                purpose: str = "") -> list[KeyBlock]:
        """Take exactly ``n_bits`` from the head of a lane, splitting the tail block."""
        if n_bits <= 0 or n_bits % 8:
            raise ValueError("n_bits must be a positive multiple of 8")
        with self._lock:
            queue = self._pool(peer)[lane]
            have = self._bits[(peer, lane)]
            if have < n_bits:
                raise InsufficientKey(detail=f"{self.owner}->{peer} has {have} of {n_bits} bits")
            out: list[KeyBlock] = []
            need = n_bits
            while need:
                block = queue[0]
                if block.n_bits <= need:
                    queue.popleft()
                else:
                    block, rest = block.split(need)
                    queue[0] = rest
                out.append(block)
                need -= block.n_bits
            self._spend(peer, lane, out, purpose)
            return out

    def take(self, peer: EntityId, refs: Iterable[tuple[str, int, int]], lane: Lane = Lane.RX,
             purpose: str = "") -> list[KeyBlock]:
        """Remove the exact fragments named by ``(root_id, offset, n_bits)`` refs.

        All refs are located before anything is mutated; a missing fragment
        raises :class:`KeyDesync` and leaves the pool untouched.
        """
        with self._lock:
            queue = self._pool(peer)[lane]
            items = list(queue)
            out: list[KeyBlock] = []
            for root_id, offset, n in refs:
                idx = _locate(items, root_id, offset, n)
                if idx is None:
                    raise KeyDesync(detail=f"{self.owner}: no material {root_id}@{offset}+{n}")
                block = items[idx]
                pieces: list[KeyBlock] = []
                rest = block
                if offset > block.offset:
                    left, rest = rest.split(offset - block.offset)
                    pieces.append(left)
                if rest.n_bits > n:
                    rest, right = rest.split(n)
                    pieces.append(right)
                items[idx:idx + 1] = pieces
                out.append(rest)
            queue.clear()
            queue.extend(items)
            self._spend(peer, lane, out, purpose)
            return out

    def _spend(self, peer: EntityId, lane: Lane, blocks: list[KeyBlock], purpose: str) -> None:
        total = 0
        for block in blocks:
            block.mark_consumed()
            total += block.n_bits
            self.audit.append(ConsumeRecord(peer, lane, block.root_id, block.offset,
                                            block.n_bits, purpose))
        self._bits[(peer, lane)] -= total
        self.counters[peer].consumed_bits += total


def _locate(items: list[KeyBlock], root_id: str, offset: int, n: int) -> int | None:
    for i, block in enumerate(items):
        if block.root_id == root_id and block.offset <= offset \
                and offset + n <= block.offset + block.n_bits:
            return i
    return None


def consume(store: KeyStore, peer: EntityId, n_bits: int) -> list[KeyBlock]:
    return store.consume(peer, n_bits)


def refill(store: KeyStore, peer: EntityId, block: KeyBlock) -> KeyStore:
    store.refill(peer, block)
    return store


def join_bits(blocks: Iterable[KeyBlock]) -> bytes:
    return b"".join(b.bits for b in blocks)


class AssetClass(str, Enum):
    KEY_DATA = "KEY_DATA"
    META_DATA = "META_DATA"
    CONTROL_MGMT = "CONTROL_MGMT"
    USER_PROFILE = "USER_PROFILE"


class MsgKind(str, Enum):
    KEY_REQUEST = "KEY_REQUEST"
    ENRICHED_REQUEST = "ENRICHED_REQUEST"
    VALIDATE = "VALIDATE"
    SERVICE_PROPERTIES = "SERVICE_PROPERTIES"
    ACCOUNTING = "ACCOUNTING"
    PEER_INIT = "PEER_INIT"
    PEER_ACK = "PEER_ACK"
    QBN_RELAY = "QBN_RELAY"
    QBN_ACK = "QBN_ACK"
    KSA_TRANSFER = "KSA_TRANSFER"
    KSA_PUSH = "KSA_PUSH"
    KSA_ACK = "KSA_ACK"
    KSA_DELIVER = "KSA_DELIVER"
    STATUS_UPDATE = "STATUS_UPDATE"
    ROUTE_REQUEST = "ROUTE_REQUEST"
    ROUTE_UPDATE = "ROUTE_UPDATE"
    ROUTE_ACK = "ROUTE_ACK"
    ALARM = "ALARM"
    HEARTBEAT = "HEARTBEAT"
    ERROR = "ERROR"


_FIXED_CLASS = {
    MsgKind.KEY_REQUEST: AssetClass.META_DATA,
    MsgKind.ENRICHED_REQUEST: AssetClass.USER_PROFILE,
    MsgKind.VALIDATE: AssetClass.USER_PROFILE,
    MsgKind.SERVICE_PROPERTIES: AssetClass.USER_PROFILE,
    MsgKind.ACCOUNTING: AssetClass.USER_PROFILE,
    MsgKind.PEER_INIT: AssetClass.META_DATA,
    MsgKind.PEER_ACK: AssetClass.META_DATA,
    MsgKind.QBN_RELAY: AssetClass.KEY_DATA,
    MsgKind.QBN_ACK: AssetClass.META_DATA,
    MsgKind.KSA_ACK: AssetClass.META_DATA,
    MsgKind.STATUS_UPDATE: AssetClass.CONTROL_MGMT,
    MsgKind.ROUTE_REQUEST: AssetClass.CONTROL_MGMT,
    MsgKind.ROUTE_UPDATE: AssetClass.CONTROL_MGMT,
    MsgKind.ROUTE_ACK: AssetClass.CONTROL_MGMT,
    MsgKind.ALARM: AssetClass.CONTROL_MGMT,
    MsgKind.HEARTBEAT: AssetClass.CONTROL_MGMT,
    MsgKind.ERROR: AssetClass.META_DATA,
}

_KSA_KINDS = (MsgKind.KSA_TRANSFER, MsgKind.KSA_PUSH, MsgKind.KSA_DELIVER)


def classify(kind: MsgKind, payload: dict[str, Any] | None = None) -> AssetClass:
    """Asset class of a message; KSA carriers are KEY_DATA only when they hold keys."""
    kind = MsgKind(kind)
    if kind in _KSA_KINDS:
        return AssetClass.KEY_DATA if (payload or {}).get("keys") else AssetClass.META_DATA
    return _FIXED_CLASS[kind]


@dataclass
class ProtocolMessage:
    msg_id: str
    src: EntityId
    dst: EntityId
    kind: MsgKind
    payload: dict[str, Any] = field(default_factory=dict)
    correlation_id: str = ""
    asset_class: AssetClass | None = None

    def __post_init__(self) -> None:
        self.kind = MsgKind(self.kind)
        if self.asset_class is None:
            self.asset_class = classify(self.kind, self.payload)

    def to_dict(self) -> dict[str, Any]:
        return {
            "msg_id": self.msg_id,
            "from": str(self.src),
            "to": str(self.dst),
            "kind": self.kind.value,
            "asset_class": self.asset_class.value,
            "correlation_id": self.correlation_id,
            "payload": self.payload,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ProtocolMessage:
        return cls(data["msg_id"], eid(data["from"]), eid(data["to"]), MsgKind(data["kind"]),
                   data.get("payload") or {}, data.get("correlation_id", ""),
                   AssetClass(data["asset_class"]))


def iter_strings(obj: Any) -> Iterator[str]:
    """Every string leaf and dict key inside a JSON-like value."""
    if isinstance(obj, str):
        yield obj
    elif isinstance(obj, dict):
        for k, v in obj.items():
            yield str(k)
            yield from iter_strings(v)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            yield from iter_strings(v)
