"""Message fabric between components.

Two interchangeable backends share one interface (``register``, ``send``,
``schedule``, ``now``, ``run_until``):

* :class:`SimTransport` is a deterministic discrete-event loop.
* :class:`SocketTransport` carries the same messages over localhost TCP with
  pre-shared-key mutual authentication.

Every send passes the channel policy gate first.
"""

from __future__ import annotations

import asyncio
import heapq
import hmac
import json
import logging
import os
import struct
from dataclasses import dataclass
from typing import Any, Callable, TextIO

import numpy as np

from .crypto_relay import ChannelRegistry, ChannelSpec, Decision
from .domain import EntityId, IdSource, MsgKind, ProtocolMessage

log = logging.getLogger(__name__)

Handler = Callable[[ProtocolMessage], None]


@dataclass(frozen=True)
class Receipt:
    ok: bool
    reason: str = ""
    deliver_at: float | None = None

    def __bool__(self) -> bool:
        return self.ok


class Timer:
    __slots__ = ("cancelled", "handle")

    def __init__(self) -> None:
        self.cancelled = False
        self.handle: Any = None

    def cancel(self) -> None:
        self.cancelled = True
        if self.handle is not None:
            self.handle.cancel()


TRACE_LEVELS = ("full", "headers", "off")


class TraceWriter:
    """JSON-lines message trace; ``keep`` also retains records in memory."""

    def __init__(self, out: TextIO | None = None, level: str = "full", keep: bool = False) -> None:
        if level not in TRACE_LEVELS:
            raise ValueError(f"trace level must be one of {TRACE_LEVELS}")
        self.out = out
        self.level = level
        self.keep = keep
        self.records: list[dict] = []
        self._seq = 0

    def record(self, event: str, t: float, msg: ProtocolMessage, channel: str | None,
               **extra: Any) -> None:
        if self.level == "off":
            return
        body = msg.to_dict()
        if self.level == "headers":
            del body["payload"]
        rec = {"seq": self._seq, "t": round(t, 9), "event": event, "channel": channel, **body}
        rec.update(extra)
        self._seq += 1
        if self.keep:
            self.records.append(rec)
        if self.out is not None:
            self.out.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


class BaseTransport:
    """Policy gate, channel and entity state, handler registry."""

    def __init__(self, registry: ChannelRegistry, *, seed: int = 0,
                 trace: TraceWriter | None = None) -> None:
        self.registry = registry
        self.ids = IdSource(seed)
        self.trace = trace or TraceWriter(level="off")
        self.handlers: dict[EntityId, Handler] = {}
        self.down_channels: set[frozenset] = set()
        self.down_entities: set[EntityId] = set()
        self.deny_hooks: list[Callable[[ProtocolMessage, str], None]] = []
        self.stats = {"sent": 0, "delivered": 0, "denied": 0, "dropped": 0}

    # -- wiring -----------------------------------------------------------
    def register(self, entity: EntityId, handler: Handler) -> None:
        self.handlers[entity] = handler

    def message(self, src: EntityId, dst: EntityId, kind: MsgKind, payload: dict | None = None,
                correlation_id: str = "") -> ProtocolMessage:
        return ProtocolMessage(self.ids.new(), src, dst, kind, payload or {}, correlation_id)

    def set_channel_state(self, a: EntityId, b: EntityId, up: bool) -> None:
        key = frozenset({a, b})
        if up:
            self.down_channels.discard(key)
        else:
            self.down_channels.add(key)

    def set_entity_state(self, entity: EntityId, up: bool) -> None:
        if up:
            self.down_entities.discard(entity)
        else:
            self.down_entities.add(entity)

    def check(self, msg: ProtocolMessage) -> tuple[Decision, ChannelSpec | None]:
        channel = self.registry.get(msg.src, msg.dst)
        return self.registry.check(msg), channel

    def _deny(self, msg: ProtocolMessage, reason: str, channel: ChannelSpec | None) -> Receipt:
        self.stats["denied"] += 1
        self.trace.record("deny", self.now, msg, channel.channel_id if channel else None,
                          reason=reason)
        for hook in self.deny_hooks:
            hook(msg, reason)
        return Receipt(False, reason)

    def _gate(self, msg: ProtocolMessage) -> tuple[Receipt | None, ChannelSpec | None]:
        decision, channel = self.check(msg)
        if not decision:
            return self._deny(msg, "POLICY_DENY", channel), channel
        if channel.key in self.down_channels:
            self.trace.record("down", self.now, msg, channel.channel_id, reason="CHANNEL_DOWN")
            return Receipt(False, "CHANNEL_DOWN"), channel
        return None, channel

    @property
    def now(self) -> float:  # pragma: no cover - overridden
        raise NotImplementedError


class SimTransport(BaseTransport):
    """Single-threaded event loop with a total event order.

    Events sort by (time, insertion sequence); per-channel, per-direction
    deliveries never overtake each other even when latency is jittered.
    """

    def __init__(self, registry: ChannelRegistry, *, seed: int = 0,
                 trace: TraceWriter | None = None) -> None:
        super().__init__(registry, seed=seed, trace=trace)
        self._now = 0.0
        self._queue: list[tuple[float, int, Callable[[], None], Timer | None]] = []
        self._seq = 0
        self._last: dict[tuple[EntityId, EntityId], float] = {}
        self._jitter = np.random.default_rng(np.random.SeedSequence([seed, 0x7A7]))

    @property
    def now(self) -> float:
        return self._now

    def _push(self, at: float, fn: Callable[[], None], timer: Timer | None = None) -> None:
        heapq.heappush(self._queue, (at, self._seq, fn, timer))
        self._seq += 1

    def schedule(self, delay: float, fn: Callable[[], None]) -> Timer:
        if delay < 0:
            raise ValueError("delay must be non-negative")
        timer = Timer()
        self._push(self._now + delay, fn, timer)
        return timer

    def latency(self, channel: ChannelSpec) -> float:
        lat = channel.latency_ms
        if channel.latency_std_ms:
            lat = max(0.0, float(self._jitter.normal(lat, channel.latency_std_ms)))
        return lat / 1000.0

    def send(self, msg: ProtocolMessage) -> Receipt:
        self.stats["sent"] += 1
        refused, channel = self._gate(msg)
        if refused is not None:
            return refused
        key = (msg.src, msg.dst)
        at = max(self._now + self.latency(channel), self._last.get(key, 0.0))
        self._last[key] = at
        self.trace.record("send", self._now, msg, channel.channel_id, deliver_at=round(at, 9))
        self._push(at, lambda: self._deliver(msg, channel))
        return Receipt(True, deliver_at=at)

    def _deliver(self, msg: ProtocolMessage, channel: ChannelSpec) -> None:
        handler = self.handlers.get(msg.dst)
        if handler is None or msg.dst in self.down_entities or channel.key in self.down_channels:
            self.stats["dropped"] += 1
            self.trace.record("drop", self._now, msg, channel.channel_id)
            return
        self.stats["delivered"] += 1
        handler(msg)

    def step(self) -> bool:
        """Run the next event; False when the queue is empty."""
        while self._queue:
            at, _, fn, timer = heapq.heappop(self._queue)
            if timer is not None and timer.cancelled:
                continue
            self._now = max(self._now, at)
            fn()
            return True
        return False

    def next_time(self) -> float | None:
        while self._queue and self._queue[0][3] is not None and self._queue[0][3].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0][0] if self._queue else None

    def run_until(self, predicate: Callable[[], bool] | None = None, *,
                  t_max: float | None = None, max_events: int | None = None) -> bool:
        """Process events until ``predicate`` holds, time passes ``t_max``,
        or nothing is left. Returns the final predicate value (True if none)."""
        count = 0
        while True:
            if predicate is not None and predicate():
                return True
            nxt = self.next_time()
            if nxt is None or (t_max is not None and nxt > t_max):
                if t_max is not None and t_max > self._now:
                    self._now = t_max
                return predicate() if predicate is not None else True
            if max_events is not None and count >= max_events:
                return predicate() if predicate is not None else False
            self.step()
            count += 1

    def advance_clock(self, dt: float) -> int:
        """Execute everything due within the next ``dt`` seconds."""
        if dt < 0:
            raise ValueError("dt must be non-negative")
        if dt == 0:
            return 0
        target = self._now + dt
        count = 0
        while (nxt := self.next_time()) is not None and nxt <= target:
            self.step()
            count += 1
        self._now = target
        return count


# -- socket backend ---------------------------------------------------------

FRAME_JSON = 0x01
FRAME_OCTETS = 0x02
FRAME_AUTH = 0x03
_LEN = struct.Struct(">I")
_TAG = 16


def channel_psk(master: bytes, a: EntityId, b: EntityId) -> bytes:
    """Per-channel pre-shared key derived from the provisioning secret."""
    x, y = sorted((a, b))
    return hmac.digest(master, f"psk|{x}|{y}".encode(), "sha256")


def encode_frame(kind: int, body: bytes, key: bytes | None = None) -> bytes:
    tag = hmac.digest(key, bytes([kind]) + body, "sha256")[:_TAG] if key else b""
    return _LEN.pack(1 + len(body) + len(tag)) + bytes([kind]) + body + tag


async def read_frame(reader: asyncio.StreamReader, key: bytes | None = None) -> tuple[int, bytes]:
    head = await reader.readexactly(_LEN.size)
    (n,) = _LEN.unpack(head)
    data = await reader.readexactly(n)
    kind, body = data[0], data[1:]
    if key:
        body, tag = body[:-_TAG], body[-_TAG:]
        if not hmac.compare_digest(hmac.digest(key, bytes([kind]) + body, "sha256")[:_TAG], tag):
            raise ConnectionError("frame authentication failed")
    return kind, body


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


class SocketTransport(BaseTransport):
    """Localhost TCP backend: one listener per entity, one persistent
    authenticated connection per ordered channel direction."""

    def __init__(self, registry: ChannelRegistry, *, secret: bytes, seed: int = 0,
                 trace: TraceWriter | None = None, host: str = "127.0.0.1") -> None:
        super().__init__(registry, seed=seed, trace=trace)
        self.secret = secret
        self.host = host
        self.loop = asyncio.new_event_loop()
        self._t0 = self.loop.time()
        self.ports: dict[EntityId, int] = {}
        self._servers: list[asyncio.AbstractServer] = []
        self._queues: dict[tuple[EntityId, EntityId], asyncio.Queue] = {}
        self._tasks: list[asyncio.Task] = []
        self.auth_failures = 0

    @property
    def now(self) -> float:
        return self.loop.time() - self._t0

    def register(self, entity: EntityId, handler: Handler) -> None:
        super().register(entity, handler)
        server = self.loop.run_until_complete(asyncio.start_server(
            lambda r, w, e=entity: self._serve(e, r, w), self.host, 0))
        self._servers.append(server)
        self.ports[entity] = server.sockets[0].getsockname()[1]

    def schedule(self, delay: float, fn: Callable[[], None]) -> Timer:
        timer = Timer()
        timer.handle = self.loop.call_later(delay, fn)
        return timer

    def send(self, msg: ProtocolMessage) -> Receipt:
        self.stats["sent"] += 1
        refused, channel = self._gate(msg)
        if refused is not None:
            return refused
        key = (msg.src, msg.dst)
        queue = self._queues.get(key)
        if queue is None:
            queue = self._queues[key] = asyncio.Queue()
            self._tasks.append(self.loop.create_task(self._writer(msg.src, msg.dst, queue)))
        self.trace.record("send", self.now, msg, channel.channel_id)
        queue.put_nowait(msg)
        return Receipt(True)

    # handshake: client hello(nonce_c) -> server (nonce_s, mac_s) -> client mac_c
    async def _writer(self, src: EntityId, dst: EntityId, queue: asyncio.Queue) -> None:
        psk = channel_psk(self.secret, src, dst)
        reader, writer = await asyncio.open_connection(self.host, self.ports[dst])
        nonce_c = os.urandom(16)
        writer.write(encode_frame(FRAME_AUTH, canonical_json(
            {"from": str(src), "to": str(dst), "nonce": nonce_c.hex()})))
        _, body = await read_frame(reader)
        reply = json.loads(body)
        nonce_s = bytes.fromhex(reply["nonce"])
        transcript = f"{src}|{dst}".encode() + nonce_c + nonce_s
        if not hmac.compare_digest(bytes.fromhex(reply["mac"]),
                                   hmac.digest(psk, b"S" + transcript, "sha256")):
            self.auth_failures += 1
            writer.close()
            raise ConnectionError(f"server {dst} failed authentication")
        writer.write(encode_frame(FRAME_AUTH, hmac.digest(psk, b"C" + transcript, "sha256")))
        session = hmac.digest(psk, b"K" + nonce_c + nonce_s, "sha256")
        while True:
            msg = await queue.get()
            writer.write(encode_frame(FRAME_JSON, canonical_json(msg.to_dict()), session))
            await writer.drain()

    async def _serve(self, me: EntityId, reader: asyncio.StreamReader,
                     writer: asyncio.StreamWriter) -> None:
        try:
            _, body = await read_frame(reader)
            hello = json.loads(body)
            src = EntityId.parse(hello["from"])
            if EntityId.parse(hello["to"]) != me:
                raise ConnectionError("misdirected connection")
            psk = channel_psk(self.secret, src, me)
            nonce_c = bytes.fromhex(hello["nonce"])
            nonce_s = os.urandom(16)
            transcript = f"{src}|{me}".encode() + nonce_c + nonce_s
            writer.write(encode_frame(FRAME_AUTH, canonical_json(
                {"nonce": nonce_s.hex(),
                 "mac": hmac.digest(psk, b"S" + transcript, "sha256").hex()})))
            _, mac_c = await read_frame(reader)
            if not hmac.compare_digest(mac_c, hmac.digest(psk, b"C" + transcript, "sha256")):
                self.auth_failures += 1
                raise ConnectionError(f"client {src} failed authentication")
            session = hmac.digest(psk, b"K" + nonce_c + nonce_s, "sha256")
            while True:
                kind, body = await read_frame(reader, session)
                if kind != FRAME_JSON:
                    continue
                msg = ProtocolMessage.from_dict(json.loads(body))
                if msg.src != src or msg.dst != me:
                    raise ConnectionError("spoofed envelope")
                self._dispatch(msg)
        except (asyncio.IncompleteReadError, ConnectionError) as exc:
            log.debug("connection to %s closed: %s", me, exc)
        finally:
            if not self.loop.is_closed():
                writer.close()

    def _dispatch(self, msg: ProtocolMessage) -> None:
        handler = self.handlers.get(msg.dst)
        if handler is None or msg.dst in self.down_entities:
            self.stats["dropped"] += 1
            return
        self.stats["delivered"] += 1
        handler(msg)

    def run_until(self, predicate: Callable[[], bool] | None = None, *,
                  t_max: float | None = None, max_events: int | None = None) -> bool:
        """Drive the event loop until ``predicate`` holds or ``t_max`` (seconds
        of loop time) elapses."""
        deadline = t_max if t_max is not None else self.now + 30.0

        async def wait() -> bool:
            while self.now < deadline:
                if predicate is not None and predicate():
                    return True
                await asyncio.sleep(0.001)
            return predicate() if predicate is not None else True

        return self.loop.run_until_complete(wait())

    def close(self) -> None:
        if self.loop.is_closed():
            return
        for server in self._servers:
            server.close()
        pending = asyncio.all_tasks(self.loop)
        for task in pending:
            task.cancel()
        if pending:
            self.loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))
        for server in self._servers:
            self.loop.run_until_complete(server.wait_closed())
        self.loop.run_until_complete(asyncio.sleep(0))
        self.loop.close()
