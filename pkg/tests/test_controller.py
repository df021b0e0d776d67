from __future__ import annotations

import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qkdn.controller import Controller, NoPath, WeightParams, compute_path, link_weight
from qkdn.crypto_relay import CIA, IA, ChannelRegistry, ChannelSpec, KeyChannel
from qkdn.ckms import Ckms
from qkdn.domain import AssetClass, EntityId, KeyStore, Kind, MsgKind
from qkdn.transport import SimTransport, TraceWriter


def brute_force(graph, src, dst):
    """Every simple path, minimum (weight, node-name sequence)."""
    best = None

    def walk(node, path, total):
        nonlocal best
        if best is not None and total > best[0]:
            return
        if node == dst:
            cand = (total, tuple(str(p) for p in path), tuple(path))
            if best is None or cand[:2] < best[:2]:
                best = cand
            return
        for nbr, w in graph[node].items():
            if nbr not in path:
                path.append(nbr)
                walk(nbr, path, total + w)
                path.pop()

    walk(src, [src], Fraction(0))
    if best is None:
        raise NoPath()
    return best[0], best[2]


def random_graph(rng: random.Random):
    n = rng.randint(2, 12)
    nodes = [f"n{i}" for i in rng.sample(range(1, 40), n)]
    p = rng.uniform(0.15, 0.5)
    g = {v: {} for v in nodes}
    for i, a in enumerate(nodes):
        for b in nodes[i + 1:]:
            if rng.random() < p:
                # small integer weights make ties common
                w = Fraction(rng.randint(1, 4)) if rng.random() < 0.6 else \
                    Fraction(rng.randint(1, 1000), rng.randint(1, 50))
                g[a][b] = g[b][a] = w
    return g, nodes


def test_compute_path_matches_brute_force():
    rng = random.Random(20240601)
    compared = 0
    for _ in range(200):
        g, nodes = random_graph(rng)
        src, dst = rng.sample(nodes, 2)
        try:
            expected = brute_force(g, src, dst)
        except NoPath:
            with pytest.raises(NoPath):
                compute_path(g, src, dst)
            continue
        assert compute_path(g, src, dst) == expected
        compared += 1
    assert compared > 100


def test_bypass_tie_break_is_lexicographic():
    g = {"n7": {"n8": Fraction(2), "n16": Fraction(1)},
         "n8": {"n7": Fraction(2), "n16": Fraction(1)},
         "n16": {"n7": Fraction(1), "n8": Fraction(1)}}
    assert brute_force(g, "n7", "n8") == (2, ("n7", "n16", "n8"))
    assert compute_path(g, "n7", "n8") == (2, ("n7", "n16", "n8"))


def chain(n: int, down: set[int] = frozenset(), bypass: bool = False):
    g = {f"n{i}": {} for i in range(2, n + 1)}
    for i in range(2, n):
        if i not in down:
            g[f"n{i}"][f"n{i + 1}"] = g[f"n{i + 1}"][f"n{i}"] = Fraction(1)
    if bypass:
        g["n16"] = {"n7": Fraction(1), "n8": Fraction(1)}
        g["n7"]["n16"] = g["n8"]["n16"] = Fraction(1)
    return g


def test_chain_and_fault_cases():
    _, path = compute_path(chain(14), "n14", "n2")
    assert path == tuple(f"n{i}" for i in range(14, 1, -1))
    _, path = compute_path(chain(14, down={7}, bypass=True), "n14", "n2")
    assert "n16" in path and brute_force(chain(14, down={7}, bypass=True), "n14", "n2")[1] == path
    with pytest.raises(NoPath):
        compute_path(chain(14, down={7}), "n14", "n2")


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10 ** 6), scale=st.fractions(min_value=Fraction(1, 1000),
                                                        max_value=Fraction(1000)))
def test_scaling_weights_keeps_path(seed, scale):
    if scale <= 0:
        return
    g, nodes = random_graph(random.Random(seed))
    src, dst = nodes[0], nodes[-1]
    scaled = {a: {b: w * scale for b, w in nb.items()} for a, nb in g.items()}
    try:
        _, path = compute_path(g, src, dst)
    except NoPath:
        with pytest.raises(NoPath):
            compute_path(scaled, src, dst)
        return
    assert compute_path(scaled, src, dst)[1] == path


def test_weight_is_monotone_in_stock_and_rate():
    p = WeightParams()
    assert link_weight(256, 1000, p) > link_weight(2560, 1000, p)
    assert link_weight(2560, 100, p) > link_weight(2560, 1000, p)
    assert link_weight(0, 0, p) == 1 + 10 ** 5 + 10 ** 4
    assert link_weight(10 ** 5, 10 ** 4, p) == 3


# -- the controller as a running component -------------------------------------------

def small_fabric(pairs):
    """CKMS actors joined in the given pairs plus a controller, on a sim transport."""
    ctrl = EntityId(Kind.CONTROLLER, "dc")
    ids = sorted({EntityId(Kind.CKMS, x) for p in pairs for x in p})
    reg = ChannelRegistry()
    keymeta = frozenset({AssetClass.KEY_DATA, AssetClass.META_DATA})
    for a, b in pairs:
        reg.add(ChannelSpec(EntityId(Kind.CKMS, a), EntityId(Kind.CKMS, b), keymeta, CIA))
    for c in ids:
        reg.add(ChannelSpec(c, ctrl, frozenset({AssetClass.CONTROL_MGMT}), IA))
    trace = TraceWriter(level="full", keep=True)
    net = SimTransport(reg, trace=trace)
    stores = {c: KeyStore(c) for c in ids}
    chans = {c: {} for c in ids}
    for a, b in pairs:
        ea, eb = EntityId(Kind.CKMS, a), EntityId(Kind.CKMS, b)
        chans[ea][eb] = KeyChannel(stores[ea], eb)
        chans[eb][ea] = KeyChannel(stores[eb], ea)
    links = [(f"{a}-{b}", EntityId(Kind.CKMS, a), EntityId(Kind.CKMS, b), "UP") for a, b in pairs]
    controller = Controller(ctrl, net, links=links)
    ckms = {c: Ckms(c, net, controller=ctrl, store=stores[c], channels=chans[c]) for c in ids}
    for c in ids:
        controller.ingest_status(c, [{"peer": str(p), "available_bits": 10 ** 6,
                                      "refill_rate_bps": 1000.0} for p in chans[c]])
    return net, controller, ckms, trace


def test_install_is_sequential_and_acked(net):
    rec = net.run_exchange("SAE:alice", "SAE:bob")
    assert rec.ok
    msgs = [r for r in net.trace.records
            if r["correlation_id"] == rec.correlation_id and r["event"] == "send"
            and r["kind"] in ("ROUTE_UPDATE", "ROUTE_ACK")]
    ctrl = "CONTROLLER:dc"
    order = [(r["from"], r["to"], r["kind"]) for r in msgs]
    path = [f"CKMS:n{i}" for i in range(14, 1, -1)]
    expected = []
    for node in path:
        expected += [(ctrl, node, "ROUTE_UPDATE"), (node, ctrl, "ROUTE_ACK")]
    expected.append((ctrl, "CKMS:n14", "ROUTE_ACK"))
    assert order == expected
    # each node on the path bumped its table exactly once
    assert all(net.ckms[EntityId.parse(n)].table.version == 1 for n in path)
    final = msgs[-1]["payload"]
    assert final["ok"] and final["path"] == path


def test_install_rolls_back_on_unresponsive_node(net):
    net.start()
    net.advance(0.1)  # first status round reaches the controller, so n9 still looks usable
    net.crash(EntityId(Kind.CKMS, "n9"))
    rec = net.run_exchange("SAE:alice", "SAE:bob")
    assert not rec.ok and rec.reason == "NO_PATH"
    dest = EntityId(Kind.CKMS, "n2")
    for i in range(10, 15):
        table = net.ckms[EntityId(Kind.CKMS, f"n{i}")].table
        assert dest not in table.entries and table.version == 2
    assert not net.controller.installed.get(EntityId(Kind.CKMS, "n10"), {})
    assert any(a.kind.value == "INSTALL_TIMEOUT" for a in net.manager.alarms)


def test_concurrent_disjoint_installs_interleave():
    net, controller, ckms, trace = small_fabric([("a", "b"), ("b", "c"), ("x", "y"), ("y", "z")])
    c = {k.name: k for k in ckms}
    p1 = controller.compute_path(c["a"], c["c"])
    p2 = controller.compute_path(c["x"], c["z"])
    controller.install_path(p1, "one", c["a"])
    controller.install_path(p2, "two", c["x"])
    assert len(controller.active) == 2
    net.run_until()
    acks = [r for r in trace.records if r["event"] == "send" and r["kind"] == "ROUTE_ACK"
            and r["from"] == "CONTROLLER:dc"]
    assert {(r["correlation_id"], r["payload"]["ok"]) for r in acks} == {("one", True), ("two", True)}
    assert ckms[c["a"]].table.entries[c["c"]] == c["b"]
    assert ckms[c["x"]].table.entries[c["z"]] == c["y"]


def test_overlapping_installs_serialize():
    net, controller, ckms, trace = small_fabric([("a", "b"), ("b", "c")])
    c = {k.name: k for k in ckms}
    controller.install_path(controller.compute_path(c["a"], c["c"]), "one", c["a"])
    controller.install_path(controller.compute_path(c["c"], c["a"]), "two", c["c"])
    assert len(controller.active) == 1 and len(controller.queued) == 1
    net.run_until()
    assert not controller.queued and not controller.active


def test_status_staleness_and_unknown_sender():
    net, controller, ckms, _ = small_fabric([("a", "b")])
    a, b = sorted(ckms)
    assert b in controller.graph()[a]
    net.advance_clock(3 * 30.0 + 1)
    assert controller.graph()[a] == {}
    with pytest.raises(Exception) as err:
        controller.ingest_status(EntityId(Kind.CKMS, "ghost"), [])
    assert getattr(err.value, "code", "") == "UNKNOWN_SENDER"


def test_weight_rises_as_stock_falls():
    net, controller, ckms, _ = small_fabric([("a", "b")])
    a, b = sorted(ckms)
    controller.ingest_status(a, [{"peer": str(b), "available_bits": 2560, "refill_rate_bps": 1000}])
    controller.ingest_status(b, [{"peer": str(a), "available_bits": 2560, "refill_rate_bps": 1000}])
    w1 = controller.graph()[a][b]
    controller.ingest_status(a, [{"peer": str(b), "available_bits": 256, "refill_rate_bps": 1000}])
    controller.ingest_status(b, [{"peer": str(a), "available_bits": 256, "refill_rate_bps": 1000}])
    assert controller.graph()[a][b] > w1


def test_controller_address_book_is_carrier_only(net):
    kinds = {e.kind for e in net.controller.registered}
    assert kinds == {Kind.CKMS}
    receipt = net.probe(EntityId(Kind.AKMS, "n2"), net.controller_id, MsgKind.ROUTE_REQUEST,
                        {"src": "CKMS:n2", "dst": "CKMS:n14"})
    assert not receipt and receipt.reason == "POLICY_DENY"


def test_views_are_json_ready(net):
    net.run_exchange("SAE:alice", "SAE:bob")
    links = net.controller.links_view()
    assert {l["link_id"] for l in links} >= {"7-8", "7-16", "16-8"}
    assert net.controller.paths_view()[-1]["path"][0] == "CKMS:n14"
