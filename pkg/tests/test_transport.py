from __future__ import annotations

import asyncio
import hmac
import io
import json
import os

import pytest

from conftest import make_network
from qkdn.crypto_relay import IA, ChannelRegistry, ChannelSpec
from qkdn.domain import AssetClass, EntityId, Kind, MsgKind
from qkdn.transport import (FRAME_AUTH, FRAME_JSON, SimTransport, SocketTransport, TraceWriter,
                            canonical_json, channel_psk, encode_frame, read_frame)

A = EntityId(Kind.CKMS, "n4")
B = EntityId(Kind.CKMS, "n5")
C = EntityId(Kind.CKMS, "n6")
SECRET = bytes(range(32))


def registry(std_ms: float = 0.0) -> ChannelRegistry:
    reg = ChannelRegistry()
    reg.add(ChannelSpec(A, B, frozenset({AssetClass.CONTROL_MGMT}), IA,
                        latency_ms=5.0, latency_std_ms=std_ms))
    return reg


class Inbox:
    def __init__(self, net, entity):
        self.got = []
        net.register(entity, self.got.append)


def ping(net, n: int = 1):
    return [net.send(net.message(A, B, MsgKind.HEARTBEAT, {"i": i})) for i in range(n)]


def test_advance_by_zero_runs_nothing():
    net = SimTransport(registry())
    inbox = Inbox(net, B)
    Inbox(net, A)
    ping(net)
    assert net.advance_clock(0) == 0 and inbox.got == []
    with pytest.raises(ValueError):
        net.advance_clock(-1.0)
    assert net.advance_clock(0.005) == 1 and len(inbox.got) == 1
    assert net.now == pytest.approx(0.005)


def test_jittered_sends_arrive_in_send_order():
    net = SimTransport(registry(std_ms=20.0), seed=5)
    inbox = Inbox(net, B)
    receipts = ping(net, 100)
    net.run_until()
    assert [m.payload["i"] for m in inbox.got] == list(range(100))
    times = [r.deliver_at for r in receipts]
    assert times == sorted(times)


def test_down_channel_refuses_send():
    trace = TraceWriter(level="full", keep=True)
    net = SimTransport(registry(), trace=trace)
    Inbox(net, B)
    net.set_channel_state(A, B, up=False)
    receipt = ping(net)[0]
    assert not receipt and receipt.reason == "CHANNEL_DOWN"
    assert trace.records[-1]["event"] == "down"
    net.set_channel_state(A, B, up=True)
    assert ping(net)[0]


def test_unregistered_channel_is_policy_denied():
    trace = TraceWriter(level="full", keep=True)
    net = SimTransport(registry(), trace=trace)
    Inbox(net, C)
    hooked = []
    net.deny_hooks.append(lambda msg, reason: hooked.append(reason))
    receipt = net.send(net.message(A, C, MsgKind.HEARTBEAT))
    assert receipt.reason == "POLICY_DENY" and hooked == ["POLICY_DENY"]
    assert net.stats["denied"] == 1 and trace.records[-1]["event"] == "deny"
    net.run_until()
    assert net.stats["delivered"] == 0


def test_same_seed_same_trace(ref_cfg):
    def run() -> str:
        out = io.StringIO()
        trace = TraceWriter(out, level="full")
        net = make_network(ref_cfg, keep=False)
        net.trace = trace
        net.net.trace = trace
        net.run_exchanges(3, "SAE:alice", "SAE:bob")
        return out.getvalue()
    first = run()
    assert first and first == run()


def test_frame_codec_authenticates():
    key = b"k" * 32

    async def roundtrip(data: bytes):
        reader = asyncio.StreamReader()
        reader.feed_data(data)
        reader.feed_eof()
        return await read_frame(reader, key)

    frame = encode_frame(FRAME_JSON, canonical_json({"b": 1, "a": 2}), key)
    assert asyncio.run(roundtrip(frame)) == (FRAME_JSON, b'{"a":2,"b":1}')
    tampered = frame[:6] + bytes([frame[6] ^ 1]) + frame[7:]
    with pytest.raises(ConnectionError):
        asyncio.run(roundtrip(tampered))


def test_socket_backend_exchange(ref_cfg):
    net = make_network(ref_cfg, backend="socket")
    try:
        recs = net.run_exchanges(2, "SAE:alice", "SAE:bob")
        assert all(r.ok for r in recs)
        assert net.net.auth_failures == 0 and net.net.stats["delivered"] > 0
    finally:
        net.close()


def test_backends_share_interface():
    sock = SocketTransport(registry(), secret=SECRET)
    try:
        for net in (SimTransport(registry()), sock):
            inbox = Inbox(net, B)
            Inbox(net, A)
            fired = []
            net.schedule(0.01, lambda: fired.append(net.now))
            assert ping(net, 3)[0]
            assert net.run_until(lambda: len(inbox.got) == 3 and fired, t_max=net.now + 5.0)
            assert [m.payload["i"] for m in inbox.got] == [0, 1, 2]
            assert isinstance(net.now, float)
    finally:
        sock.close()


def test_handshake_rejects_wrong_secret():
    net = SocketTransport(registry(), secret=SECRET)
    inbox = Inbox(net, B)
    good = channel_psk(SECRET, A, B)
    wrong = channel_psk(b"not the provisioning secret....", A, B)
    assert good != wrong

    async def intrude() -> bool:
        reader, writer = await asyncio.open_connection(net.host, net.ports[B])
        nonce_c = os.urandom(16)
        writer.write(encode_frame(FRAME_AUTH, canonical_json(
            {"from": str(A), "to": str(B), "nonce": nonce_c.hex()})))
        _, body = await read_frame(reader)
        reply = json.loads(body)
        transcript = f"{A}|{B}".encode() + nonce_c + bytes.fromhex(reply["nonce"])
        # the intruder cannot confirm the server with the wrong key
        server_ok = hmac.compare_digest(bytes.fromhex(reply["mac"]),
                                        hmac.digest(wrong, b"S" + transcript, "sha256"))
        writer.write(encode_frame(FRAME_AUTH, hmac.digest(wrong, b"C" + transcript, "sha256")))
        session = hmac.digest(wrong, b"K" + transcript[-32:], "sha256")
        msg = net.message(A, B, MsgKind.HEARTBEAT, {})
        writer.write(encode_frame(FRAME_JSON, canonical_json(msg.to_dict()), session))
        await writer.drain()
        await asyncio.sleep(0.05)
        writer.close()
        return server_ok

    try:
        assert net.loop.run_until_complete(intrude()) is False
        net.run_until(lambda: net.auth_failures > 0, t_max=net.now + 2.0)
        assert net.auth_failures == 1 and inbox.got == []
    finally:
        net.close()
