from __future__ import annotations

import pytest

from qkdn.crypto_relay import AuthFail, WrappedKey
from qkdn.domain import EntityId, Kind, Lane, MsgKind, QkdnError
from qkdn.ukms import ExchangeState, SaeRequest

ALICE, BOB, CAROL = (EntityId(Kind.SAE, n) for n in ("alice", "bob", "carol"))
U1, U15 = EntityId(Kind.UKMS, "n1"), EntityId(Kind.UKMS, "n15")


def code_of(fn, *args, **kw) -> str:
    with pytest.raises(QkdnError) as err:
        fn(*args, **kw)
    return err.value.code


def pushed_to(net, ukms: EntityId, corr: str) -> dict:
    return next(r["payload"] for r in net.trace.records if r["event"] == "send"
                and r["kind"] == "KSA_PUSH" and r["to"] == str(ukms)
                and r["correlation_id"] == corr)


def test_unknown_sae_rejected(net):
    ukms = net.ukms[U1]
    assert code_of(ukms.handle_sae_request, SaeRequest(BOB, ALICE, 1, 256, "x")) == "UNKNOWN_SAE"


@pytest.mark.parametrize("number,size", [(1, 4104), (1, 8192), (1, 32), (0, 256), (1, 260)])
def test_oversize_or_malformed_request(net, number, size):
    ukms = net.ukms[U1]
    req = SaeRequest(ALICE, BOB, number, size, "x")
    assert code_of(ukms.handle_sae_request, req) == "OVERSIZE_REQUEST"
    assert "x" not in ukms.exchanges


def test_bounds_are_inclusive(net):
    ukms = net.ukms[U1]
    for size in (64, 4096):
        ex = ukms.handle_sae_request(SaeRequest(ALICE, BOB, 1, size, f"s{size}"))
        assert ex.state is ExchangeState.WAITING


def test_enriched_request_carries_account(net):
    rec = net.run_exchange("SAE:alice", "SAE:bob")
    enriched = next(r["payload"] for r in net.trace.records if r["kind"] == "ENRICHED_REQUEST"
                    and r["correlation_id"] == rec.correlation_id)
    assert enriched["user_account"] == "acct-alice"
    assert enriched["request"]["master_sae"] == "SAE:alice"


def test_foreign_sae_forbidden(net):
    rec = net.run_exchange("SAE:alice", "SAE:bob")
    assert rec.ok
    ids = [k for k, _ in rec.keys_master]
    # carol shares alice's UKMS but is not bound to this exchange
    assert code_of(net.ukms[U1].deliver_to_sae, CAROL, rec.correlation_id, ids) == "FORBIDDEN"
    net.probe(CAROL, U1, MsgKind.KEY_REQUEST, {"op": "dec", "master_sae": "SAE:alice",
                                               "key_ids": ids})
    net.advance(0.5)
    answers = [r for r in net.trace.records if r["event"] == "send" and r["to"] == "SAE:carol"]
    assert [(a["kind"], a["payload"].get("reason")) for a in answers] == [("ERROR", "FORBIDDEN")]
    # the master's own UKMS will not hand the slave's copy to the master either
    assert code_of(net.ukms[U15].deliver_to_sae, ALICE, rec.correlation_id, ids) == "FORBIDDEN"


def test_slave_fetch_before_push_is_not_ready(net):
    assert code_of(net.ukms[U15].deliver_to_sae, BOB, "later", ["k"]) == "NOT_READY"


def test_replayed_push_is_idempotent(net):
    rec = net.start_exchange("SAE:alice", "SAE:bob", notify=False)
    net.wait_for(lambda: bool(rec.keys_master), 30.0)
    ukms = net.ukms[U15]
    payload = pushed_to(net, U15, rec.correlation_id)
    wrapped = [WrappedKey.from_payload(w) for w in payload["keys"]]
    before = net.stores[U15].pool_bits(EntityId(Kind.AKMS, "n14"), Lane.RX)
    ex = ukms.receive_ksa(wrapped, rec.correlation_id, payload)
    assert ex is ukms.exchanges[rec.correlation_id] and ex.state is ExchangeState.READY
    assert net.stores[U15].pool_bits(EntityId(Kind.AKMS, "n14"), Lane.RX) == before
    assert ukms.status(BOB, ALICE)["stored_key_count"] == 1


def test_replay_under_new_exchange_fails_auth(net):
    rec = net.run_exchange("SAE:alice", "SAE:bob")
    payload = pushed_to(net, U15, rec.correlation_id)
    wrapped = [WrappedKey.from_payload(w) for w in payload["keys"]]
    with pytest.raises(AuthFail):
        net.ukms[U15].receive_ksa(wrapped, "forged", payload)


def test_push_for_unknown_exchange(net):
    ukms = net.ukms[U1]
    assert code_of(ukms.receive_ksa, [], "nope") == "NO_SUCH_EXCHANGE"
    assert [a.kind.value for a in ukms.local_alarms] == ["NO_SUCH_EXCHANGE"]


def test_buffer_limit_per_pair(net):
    ukms = net.ukms[U15]
    announce = {"master_sae": "SAE:alice", "slave_sae": "SAE:bob", "number": 17,
                "size_bits": 256}
    assert code_of(ukms.receive_ksa, [], "big", announce) == "BUFFER_FULL"


def test_failure_propagates_to_master_sae(net):
    net.crash(EntityId(Kind.AKMS, "n14"))
    rec = net.run_exchange("SAE:alice", "SAE:bob")
    assert net.ukms[U1].exchanges[rec.correlation_id].state is ExchangeState.FAILED
    assert rec.reason == "PEER_UNREACHABLE" and not rec.keys_master
