from __future__ import annotations

import dataclasses
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qkdn.audit import one_time_use
from qkdn.crypto_relay import (CIA, IA, AuthFail, ChannelSpec, KeyChannel, Mode, WrappedKey,
                               enforce_policy, unwrap, wrap)
from qkdn.domain import (AssetClass, EntityId, InsufficientKey, KeyRole, KeyStore, Kind, MsgKind,
                         ProtocolMessage, new_key_block)
from qkdn.qkd_link import QkdLink, prefill

X = EntityId(Kind.CKMS, "n8")
Y = EntityId(Kind.CKMS, "n9")


def channel_pair(bits: int = 1 << 18, seed: int = 0, **kw) -> tuple[KeyChannel, KeyChannel]:
    sx, sy = KeyStore(X), KeyStore(Y)
    lk = QkdLink("8-9", EntityId(Kind.QKD_MODULE, "8-9@n8"), EntityId(Kind.QKD_MODULE, "8-9@n9"),
                 1200.0, seed=seed)
    prefill(lk, sx, Y, sy, X, bits)
    return KeyChannel(sx, Y, **kw), KeyChannel(sy, X, **kw)


def key(n_bytes: int = 32, role: KeyRole = KeyRole.QBN):
    return new_key_block(bytes((7 * i + 3) % 256 for i in range(n_bytes)), role=role)


def test_otp_wrap_cost_and_shape():
    tx, rx = channel_pair()
    before = tx.available_bits()
    w = wrap(key(), tx, Mode.OTP)
    assert len(w.ciphertext) * 8 == 256
    assert w.consumed_kma_bits == 384 == before - tx.available_bits()
    assert w.nonce == bytes(12)


def test_gcm_budget_flat_per_session():
    tx, rx = channel_pair()
    before = tx.available_bits()
    frames = [wrap(key(), tx, Mode.AES256GCM) for _ in range(100)]
    assert before - tx.available_bits() == 256
    assert [f.consumed_kma_bits for f in frames] == [256] + [0] * 99
    assert len({f.nonce for f in frames}) == 100
    assert all(unwrap(f, rx).bits == key().bits for f in frames)


def test_gcm_rekeys_after_threshold():
    tx, rx = channel_pair(rekey_after=3)
    before = tx.available_bits()
    frames = [wrap(key(), tx, Mode.AES256GCM) for _ in range(7)]
    assert before - tx.available_bits() == 3 * 256
    assert all(unwrap(f, rx).bits == key().bits for f in frames)


@settings(max_examples=60, deadline=None)
@given(n_bytes=st.integers(1, 512), mode=st.sampled_from(list(Mode)))
def test_roundtrip_both_modes(n_bytes, mode):
    tx, rx = channel_pair(bits=1 << 16)
    plain = key(n_bytes)
    w = wrap(plain, tx, mode)
    back = unwrap(w, rx)
    assert back.bits == plain.bits and back.key_id == plain.key_id


def test_roundtrip_through_wire_payload():
    tx, rx = channel_pair()
    for mode in Mode:
        w = wrap(key(48), tx, mode)
        again = WrappedKey.from_payload(w.to_payload())
        assert unwrap(again, rx).bits == key(48).bits


def test_wire_frame_layout():
    tx, _ = channel_pair()
    w = wrap(key(), tx, Mode.AES256GCM)
    frame = w.to_frame()
    mode, nonce, length = struct.unpack(">B12sI", frame[:17])
    assert (mode, nonce, length) == (2, w.nonce, 256)
    assert frame[17:-16] == w.ciphertext and frame[-16:] == w.auth_tag
    assert len(frame) == 1 + 12 + 4 + 32 + 16


@pytest.mark.parametrize("mode", list(Mode))
def test_tampered_frame_fails_auth(mode):
    tx, rx = channel_pair()
    w = wrap(key(), tx, mode)
    flipped = bytes([w.ciphertext[0] ^ 0x01]) + w.ciphertext[1:]
    with pytest.raises(AuthFail) as err:
        unwrap(dataclasses.replace(w, ciphertext=flipped), rx)
    assert err.value.code == "AUTH_FAIL"


@pytest.mark.parametrize("mode", list(Mode))
def test_shifted_material_fails_auth(mode):
    tx, rx = channel_pair()
    w = wrap(key(), tx, mode)
    root, offset, n = w.kma_refs[0]
    shifted = [(root, offset + 8, n)] + list(w.kma_refs[1:])
    with pytest.raises(AuthFail):
        unwrap(dataclasses.replace(w, kma_refs=shifted), rx)


def test_replayed_gcm_nonce_rejected():
    tx, rx = channel_pair()
    w = wrap(key(), tx, Mode.AES256GCM)
    unwrap(w, rx)
    with pytest.raises(AuthFail):
        unwrap(w, rx)


def test_wrap_needs_material():
    tx, _ = channel_pair(bits=0)
    with pytest.raises(InsufficientKey):
        wrap(key(), tx, Mode.OTP)


def test_otp_material_never_serves_twice():
    tx, rx = channel_pair()
    for i in range(50):
        unwrap(wrap(key(16 + i), tx, Mode.OTP), rx)
    audit = one_time_use([tx.store, rx.store])
    assert audit.reused == [] and audit.unmatched == []
    assert audit.tx_bits == audit.rx_bits == sum((16 + i) * 8 + 128 for i in range(50))


def test_per_hop_ciphertexts_differ():
    a, _ = channel_pair(seed=1)
    b, _ = channel_pair(seed=2)
    plain = key()
    assert wrap(plain, a, Mode.OTP).ciphertext != wrap(plain, b, Mode.OTP).ciphertext


AKMS = EntityId(Kind.AKMS, "n2")
CKMS = EntityId(Kind.CKMS, "n2")
UKMS = EntityId(Kind.UKMS, "n1")
CTRL = EntityId(Kind.CONTROLLER, "dc")
KEYMETA = frozenset({AssetClass.KEY_DATA, AssetClass.META_DATA})


def msg(src, dst, kind, payload=None):
    return ProtocolMessage("m", src, dst, kind, payload or {})


def test_policy_forbids_akms_to_controller():
    ch = ChannelSpec(AKMS, CTRL, frozenset(AssetClass), CIA)
    d = enforce_policy(msg(AKMS, CTRL, MsgKind.STATUS_UPDATE), ch)
    assert not d and d.reason == "FORBIDDEN_CHANNEL"


def test_policy_allows_ksa_push_on_secured_leg():
    ch = ChannelSpec(UKMS, AKMS, KEYMETA, CIA)
    assert enforce_policy(msg(AKMS, UKMS, MsgKind.KSA_PUSH, {"keys": [{}]}), ch)


def test_policy_intra_node_needs_no_confidentiality():
    intra = ChannelSpec(AKMS, CKMS, KEYMETA, IA, intra_node=True)
    assert enforce_policy(msg(AKMS, CKMS, MsgKind.QBN_RELAY), intra)
    remote = ChannelSpec(AKMS, EntityId(Kind.CKMS, "n3"), KEYMETA, IA)
    d = enforce_policy(msg(AKMS, EntityId(Kind.CKMS, "n3"), MsgKind.QBN_RELAY), remote)
    assert d.reason == "INSUFFICIENT_PROTECTION"


def test_policy_denies_unregistered_and_user_to_carrier():
    assert enforce_policy(msg(AKMS, CKMS, MsgKind.QBN_RELAY), None).reason == "UNREGISTERED_CHANNEL"
    ch = ChannelSpec(UKMS, CKMS, frozenset(AssetClass), CIA)
    assert enforce_policy(msg(UKMS, CKMS, MsgKind.KEY_REQUEST), ch).reason == "FORBIDDEN_CHANNEL"
    ctrl = ChannelSpec(CKMS, CTRL, frozenset({AssetClass.CONTROL_MGMT}), IA)
    assert enforce_policy(msg(CKMS, CTRL, MsgKind.QBN_RELAY), ctrl).reason == "CLASS_NOT_PERMITTED"
