"""Assembly of a running network from a topology config: key stores, QKD
links, channels, every component, SAE clients, periodic tasks and fault
injection hooks."""

from __future__ import annotations

import base64
import hashlib
import itertools
import logging
import uuid
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from .aaa import Aaa, AlarmCsv, Manager, TranslationEntry, UserProfile
from .actor import Actor, AlarmKind, Severity
from .akms import Akms
from .ckms import Ckms
from .config import node_index, validate_config
from .controller import Controller, WeightParams
from .crypto_relay import CIA, IA, ChannelRegistry, ChannelSpec, KeyChannel
from .domain import (AssetClass, EntityId, IdSource, KeyBlock, KeyRole, KeyStore, Kind, Lane,
                     MsgKind, Origin, OriginKind, ProtocolMessage, eid)
from .qkd_link import LinkState, QkdLink, TelemetryCsv, deliver_pair, prefill, set_state, tick
from .rng import HybridRng
from .transport import SimTransport, SocketTransport, TraceWriter
from .ukms import Ukms

log = logging.getLogger(__name__)

KEY_META = frozenset({AssetClass.KEY_DATA, AssetClass.META_DATA})
CONTROL = frozenset({AssetClass.CONTROL_MGMT})
PRESHARED_BLOCK_BITS = 1 << 16


def derive_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}|{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def kms_entity(node, other) -> EntityId:
    """Which KMS at ``node`` terminates a QKD link towards ``other``."""
    if node.type == "USER":
        return EntityId(Kind.UKMS, node.id)
    if node.type == "ACCESS" and other.type == "USER":
        return EntityId(Kind.AKMS, node.id)
    return EntityId(Kind.CKMS, node.id)


def preshared_blocks(secret: bytes, src: EntityId, dst: EntityId, n_bits: int,
                     block_bits: int = PRESHARED_BLOCK_BITS) -> list[KeyBlock]:
    """Deterministic expansion of a provisioning secret into the material
    ``src`` may send with towards ``dst``; both ends compute the same blocks."""
    count = -(-n_bits // block_bits)
    stream = hashlib.shake_256(secret + f"|{src}->{dst}".encode()).digest(count * block_bits // 8)
    origin = Origin(OriginKind.PRESHARED)
    out = []
    step = block_bits // 8
    for i in range(count):
        key_id = str(_uuid_from(secret, f"{src}->{dst}#{i}"))
        out.append(KeyBlock(key_id, stream[i * step:(i + 1) * step], origin, KeyRole.KMA))
    return out


def _uuid_from(secret: bytes, label: str) -> uuid.UUID:
    return uuid.UUID(bytes=hashlib.sha256(secret + label.encode()).digest()[:16], version=4)


@dataclass
class ExchangeRecord:
    correlation_id: str
    master: EntityId
    slave: EntityId
    number: int
    size_bits: int
    t_start: float
    t_master: float | None = None
    t_end: float | None = None
    reason: str = ""
    notify: bool = True
    attempts: int = 0
    keys_master: list[tuple[str, bytes]] = field(default_factory=list)
    keys_slave: list[tuple[str, bytes]] = field(default_factory=list)

    @property
    def done(self) -> bool:
        return self.t_end is not None or bool(self.reason)

    @property
    def ok(self) -> bool:
        return self.t_end is not None and not self.reason and self.agree

    @property
    def agree(self) -> bool:
        return bool(self.keys_master) and self.keys_master == self.keys_slave

    @property
    def t_key(self) -> float | None:
        return None if self.t_end is None else self.t_end - self.t_start


class SaeClient(Actor):
    """Harness-side application: asks for keys, notifies its peer out of band,
    and lets the peer fetch the same keys."""

    def __init__(self, eid_: EntityId, net, *, ukms: EntityId, notify_delay: float,
                 directory: dict[EntityId, SaeClient]) -> None:
        super().__init__(eid_, net, None)
        self.ukms = ukms
        self.notify_delay = notify_delay
        self.directory = directory
        self.records: dict[str, ExchangeRecord] = {}
        self.max_retries = 200

    def request(self, record: ExchangeRecord) -> None:
        self.records[record.correlation_id] = record
        self.send(self.ukms, MsgKind.KEY_REQUEST,
                  {"op": "enc", "slave_sae": str(record.slave), "number": record.number,
                   "size_bits": record.size_bits}, record.correlation_id)

    def fetch(self, record: ExchangeRecord, key_ids: list[str]) -> None:
        self.records[record.correlation_id] = record
        self.send(self.ukms, MsgKind.KEY_REQUEST,
                  {"op": "dec", "master_sae": str(record.master), "key_ids": key_ids},
                  record.correlation_id)

    def on_ksa_deliver(self, msg: ProtocolMessage) -> None:
        rec = self.records.get(msg.correlation_id)
        if rec is None:
            return
        keys = [(k["key_ID"], base64.b64decode(k["key"])) for k in msg.payload["keys"]]
        if self.eid == rec.master:
            rec.keys_master = keys
            rec.t_master = self.net.now
            peer = self.directory.get(rec.slave)
            ids = [k for k, _ in keys]
            if peer is not None and rec.notify:
                self.net.schedule(self.notify_delay, lambda: peer.fetch(rec, ids))
        else:
            rec.keys_slave = keys
            rec.t_end = self.net.now

    def on_error(self, msg: ProtocolMessage) -> None:
        rec = self.records.get(msg.correlation_id)
        if rec is None or rec.done:
            return
        reason = msg.payload.get("reason", "FAILED")
        if reason == "NOT_READY" and self.eid == rec.slave:
            rec.attempts += 1
            if rec.attempts <= self.max_retries:
                ids = [k for k, _ in rec.keys_master]
                self.net.schedule(float(msg.payload.get("retry_after", 0.05)),
                                  lambda: self.fetch(rec, ids))
                return
        rec.reason = reason


class QkdModule(Actor):
    """Management-plane presence of one QKD module: heartbeats and alarms."""


class Network:
    def __init__(self, cfg: dict, *, seed: int | None = None, backend: str = "sim",
                 trace: TraceWriter | None = None, alarm_out: TextIO | None = None,
                 telemetry_out: TextIO | None = None, keep_ksa: bool = False) -> None:
        self.cfg = validate_config(cfg)
        self.seed = self.cfg["seed"] if seed is None else seed
        self.nodes = node_index(self.cfg)
        self.secret = bytes.fromhex(self.cfg["secrets"]["master"])
        self.registry = ChannelRegistry()
        self.trace = trace or TraceWriter(level="off")
        self.backend = backend
        self._exchange_ids = IdSource(derive_seed(self.seed, "exchanges"))
        self.records: list[ExchangeRecord] = []
        self.alarm_csv = AlarmCsv(alarm_out)
        self.telemetry_csv = TelemetryCsv(telemetry_out)
        self.telemetry_stats: dict[str, list[float]] = {}
        self._started = False
        self._build_entities()
        self._build_channels()
        if backend == "sim":
            self.net = SimTransport(self.registry, seed=self.seed, trace=self.trace)
        elif backend == "socket":
            self.net = SocketTransport(self.registry, secret=self.secret, seed=self.seed,
                                       trace=self.trace)
        else:
            raise ValueError(f"unknown backend {backend}")
        self._build_components(keep_ksa)

    # -- topology ---------------------------------------------------------------
    def _build_entities(self) -> None:
        cfg = self.cfg
        dc = next((n for n in self.nodes.values() if n.type == "DATACENTER"), None)
        dc_name = dc.id if dc else "dc"
        self.controller_id = EntityId(Kind.CONTROLLER, dc_name)
        self.manager_id = EntityId(Kind.MANAGER, dc_name)
        self.aaa_id = EntityId(Kind.AAA, dc_name)
        self.ukms_ids = [EntityId(Kind.UKMS, n.id) for n in self.nodes.values() if n.type == "USER"]
        self.akms_ids = [EntityId(Kind.AKMS, n.id) for n in self.nodes.values()
                         if "AKMS" in n.components]
        self.ckms_ids = [EntityId(Kind.CKMS, n.id) for n in self.nodes.values()
                         if "CKMS" in n.components]
        kms = cfg["kms"]
        self.stores: dict[EntityId, KeyStore] = {
            e: KeyStore(e, kms["capacity_bits"], kms["low_watermark_bits"])
            for e in self.ukms_ids + self.akms_ids + self.ckms_ids}
        self.session_stores = {a: KeyStore(a, 1 << 40) for a in self.akms_ids}
        self.links: dict[str, QkdLink] = {}
        self.link_kms: dict[str, tuple[EntityId, EntityId]] = {}
        for spec in cfg["links"]:
            na, nb = self.nodes[spec["a"]], self.nodes[spec["b"]]
            ka, kb = kms_entity(na, nb), kms_entity(nb, na)
            link = QkdLink(spec["id"], EntityId(Kind.QKD_MODULE, f"{spec['id']}@{na.id}"),
                           EntityId(Kind.QKD_MODULE, f"{spec['id']}@{nb.id}"),
                           spec["skr_bps"], spec.get("skr_jitter", 0.0), spec["qber_pct"],
                           spec.get("qber_jitter", 0.0),
                           LinkState(spec.get("initial_state", "UP")),
                           seed=derive_seed(self.seed, "link:" + spec["id"]))
            self.links[spec["id"]] = link
            self.link_kms[spec["id"]] = (ka, kb)
        self.sae_ukms = {eid(s["id"]): EntityId(Kind.UKMS, s["node"]) for s in cfg["saes"]}
        self.ukms_akms: dict[EntityId, EntityId] = {}
        for ka, kb in self.link_kms.values():
            for u, a in ((ka, kb), (kb, ka)):
                if u.kind is Kind.UKMS and a.kind is Kind.AKMS:
                    self.ukms_akms[u] = a

    def _build_channels(self) -> None:
        t = self.cfg["transport"]
        lat, std = t["latency_ms"], t["latency_std_ms"]

        def add(a, b, classes, security, intra=False):
            self.registry.add(ChannelSpec(a, b, frozenset(classes), security, intra, lat, std))

        for sae, ukms in self.sae_ukms.items():
            add(sae, ukms, KEY_META, CIA)
        for ka, kb in self.link_kms.values():
            kinds = {ka.kind, kb.kind}
            if kinds == {Kind.UKMS, Kind.AKMS}:
                add(ka, kb, KEY_META | {AssetClass.USER_PROFILE}, CIA)
            elif kinds == {Kind.CKMS}:
                add(ka, kb, KEY_META, CIA)
        for a in self.akms_ids:
            add(a, EntityId(Kind.CKMS, a.name), KEY_META, IA, intra=True)
            add(a, self.aaa_id, {AssetClass.USER_PROFILE}, CIA)
            for b in self.akms_ids:
                if a < b:
                    add(a, b, KEY_META, CIA)
        for c in self.ckms_ids:
            add(c, self.controller_id, CONTROL, IA)
        for dev in self.managed_devices():
            add(self.manager_id, dev, CONTROL, IA)

    def managed_devices(self) -> list[EntityId]:
        mods = [m for link in self.links.values() for m in (link.endpoint_a, link.endpoint_b)]
        return sorted(self.akms_ids + self.ckms_ids + [self.controller_id, self.aaa_id] + mods)

    def _build_components(self, keep_ksa: bool) -> None:
        cfg, kms, net = self.cfg, self.cfg["kms"], self.net
        modes = cfg["cipher_modes"]
        self.manager = Manager(self.manager_id, net, devices=self.managed_devices(),
                               controller=self.controller_id,
                               heartbeat_interval=cfg["manager"]["heartbeat_interval_s"],
                               missed_heartbeats=cfg["manager"]["missed_heartbeats"],
                               csv_out=self.alarm_csv)
        net.deny_hooks.append(lambda msg, reason: self.manager.record(
            msg.src, Severity.WARN, AlarmKind.POLICY_DENY, f"{msg.kind.value}->{msg.dst}"))
        ctrl_links = []
        for spec in cfg["links"]:
            ka, kb = self.link_kms[spec["id"]]
            if ka.kind is Kind.CKMS and kb.kind is Kind.CKMS:
                ctrl_links.append((spec["id"], ka, kb, spec.get("initial_state", "UP")))
        c = cfg["controller"]
        self.controller = Controller(self.controller_id, net, links=ctrl_links,
                                     params=WeightParams.from_config(c),
                                     status_interval=kms["status_interval_s"],
                                     install_timeout=c["install_timeout_s"],
                                     manager=self.manager_id, proactive=c["proactive"])
        directory = [TranslationEntry(sae, ukms, self.ukms_akms[ukms])
                     for sae, ukms in self.sae_ukms.items() if ukms in self.ukms_akms]
        self.aaa = Aaa(self.aaa_id, net, profiles=[UserProfile.from_dict(p) for p in cfg["profiles"]],
                       directory=directory, mode=cfg["aaa"]["mode"], manager=self.manager_id)
        # per-link channel handles at both ends
        chans: dict[EntityId, dict[EntityId, KeyChannel]] = {e: {} for e in self.stores}
        for ka, kb in self.link_kms.values():
            chans[ka][kb] = KeyChannel(self.stores[ka], kb)
            chans[kb][ka] = KeyChannel(self.stores[kb], ka)
        self.key_channels = chans
        self.ckms: dict[EntityId, Ckms] = {}
        for c_id in self.ckms_ids:
            akms = EntityId(Kind.AKMS, c_id.name)
            self.ckms[c_id] = Ckms(c_id, net, controller=self.controller_id,
                                   store=self.stores[c_id],
                                   channels={p: ch for p, ch in chans[c_id].items()
                                             if p.kind is Kind.CKMS},
                                   akms=akms if akms in self.akms_ids else None,
                                   mode=modes["carrier"], manager=self.manager_id,
                                   max_hops=kms["max_hops"],
                                   key_wait_timeout=kms["key_wait_timeout_s"],
                                   status_interval=kms["status_interval_s"])
        self.akms: dict[EntityId, Akms] = {}
        for a_id in self.akms_ids:
            peers = {b: KeyChannel(self.stores[a_id], b) for b in self.akms_ids if b != a_id}
            rng = HybridRng(derive_seed(self.seed, f"rng:{a_id}"),
                            reseed_interval=kms["rng_reseed_interval"])
            ak = Akms(a_id, net, ckms=EntityId(Kind.CKMS, a_id.name), aaa=self.aaa_id, rng=rng,
                      ukms_channels={u: ch for u, ch in chans[a_id].items() if u.kind is Kind.UKMS},
                      peer_channels=peers, session_store=self.session_stores[a_id],
                      ukms_mode=modes["ukms_leg"], peer_mode=modes["akms_peer"],
                      manager=self.manager_id, max_sessions=kms["max_sessions"],
                      retries=kms["retries"], retry_base=kms["retry_base_s"],
                      session_timeout=kms["session_timeout_s"],
                      ids=IdSource(derive_seed(self.seed, f"ids:{a_id}")))
            ak.keep_ksa_log = keep_ksa
            self.akms[a_id] = ak
        self.ukms: dict[EntityId, Ukms] = {}
        accounts = {eid(s["id"]): s["account"] for s in cfg["saes"]}
        for u_id in self.ukms_ids:
            akms = self.ukms_akms.get(u_id)
            if akms is None:
                continue
            saes = {s: accounts[s] for s, u in self.sae_ukms.items() if u == u_id}
            self.ukms[u_id] = Ukms(u_id, net, akms=akms, channel=chans[u_id][akms], saes=saes,
                                   buffer_per_pair=kms["ukms_buffer"])
        self.saes: dict[EntityId, SaeClient] = {}
        notify = self.cfg["transport"]["latency_ms"] / 1000.0
        for sae, ukms in self.sae_ukms.items():
            self.saes[sae] = SaeClient(sae, net, ukms=ukms, notify_delay=notify,
                                       directory=self.saes)
        self.modules = {m: QkdModule(m, net, self.manager_id)
                        for link in self.links.values() for m in (link.endpoint_a, link.endpoint_b)}
        self.bootstrap_akms_pools()
        # Initially-down links carry no classical traffic either.
        for link_id, link in self.links.items():
            if link.state is LinkState.DOWN:
                self.net.set_channel_state(*self.link_kms[link_id], up=False)

    def bootstrap_akms_pools(self, bits_per_lane: int = 1 << 21) -> None:
        for a, b in itertools.permutations(self.akms_ids, 2):
            for blk in preshared_blocks(self.secret, a, b, bits_per_lane):
                self.stores[a].refill(b, blk, Lane.TX)
                self.stores[b].refill(a, KeyBlock(blk.key_id, blk.bits, blk.origin, blk.role),
                                      Lane.RX)

    # -- periodic activity ------------------------------------------------------
    def start(self) -> None:
        if self._started:
            return
        self._started = True
        kms = self.cfg["kms"]
        self._every(self.cfg["link_tick_s"], self.tick_links, first=self.cfg["link_tick_s"])
        self._every(kms["status_interval_s"], self.push_status, first=0.0)
        hb = self.cfg["manager"]["heartbeat_interval_s"]
        self._every(hb, self.send_heartbeats, first=0.0)
        self._every(hb, self.manager.check_heartbeats, first=hb)

    def _every(self, period: float, fn: Callable[[], None], first: float) -> None:
        def run() -> None:
            fn()
            self.net.schedule(period, run)
        self.net.schedule(first, run)

    def alive(self, entity: EntityId) -> bool:
        return entity not in self.net.down_entities

    def push_status(self) -> None:
        for c_id, ckms in sorted(self.ckms.items()):
            if self.alive(c_id):
                ckms.status_push()

    def send_heartbeats(self) -> None:
        actors = {**self.akms, **self.ckms, self.controller_id: self.controller,
                  self.aaa_id: self.aaa, **self.modules}
        for entity in sorted(actors):
            if self.alive(entity):
                actors[entity].heartbeat()

    def tick_links(self, dt: float | None = None) -> None:
        dt = self.cfg["link_tick_s"] if dt is None else dt
        for link_id in sorted(self.links):
            link = self.links[link_id]
            result = tick(link, dt)
            ka, kb = self.link_kms[link_id]
            deliver_pair(link, result, self.stores[ka], kb, self.stores[kb], ka)
            self.telemetry_csv.append(result.telemetry)
            s = self.telemetry_stats.setdefault(link_id, [0, 0.0, 0.0, 0.0, 0.0])
            if result.telemetry.state is LinkState.UP:
                s[0] += 1
                s[1] += result.telemetry.skr_bps
                s[2] += result.telemetry.skr_bps ** 2
                s[3] += result.telemetry.qber_pct
                s[4] += result.telemetry.qber_pct ** 2

    def prefill(self, bits_per_lane: int, links: list[str] | None = None) -> None:
        for link_id in sorted(links or self.links):
            link = self.links[link_id]
            ka, kb = self.link_kms[link_id]
            cap = min(self.stores[ka].capacity_bits, self.stores[kb].capacity_bits)
            room = (cap - max(self.stores[ka].pool_bits(kb), self.stores[kb].pool_bits(ka))) // 2
            bits = min(bits_per_lane, room - room % (1 << 16))
            if bits > 0:
                prefill(link, self.stores[ka], kb, self.stores[kb], ka, bits)

    # -- faults ------------------------------------------------------------------
    def set_link_state(self, link_id: str, state: str) -> None:
        link = self.links[link_id]

        def notify(lk: QkdLink, st: LinkState) -> None:
            kind = AlarmKind.LINK_DOWN if st is LinkState.DOWN else AlarmKind.LINK_UP
            sev = Severity.CRITICAL if st is LinkState.DOWN else Severity.INFO
            self.modules[lk.endpoint_a].send(
                self.manager_id, MsgKind.ALARM,
                {"kind": kind.value, "severity": sev.value, "detail": lk.link_id,
                 "link_id": lk.link_id})

        set_state(link, state, notify)
        self.net.set_channel_state(*self.link_kms[link_id], up=link.state is LinkState.UP)

    def crash(self, entity: EntityId) -> None:
        self.net.set_entity_state(entity, up=False)

    def recover(self, entity: EntityId) -> None:
        self.net.set_entity_state(entity, up=True)

    def probe(self, src: EntityId, dst: EntityId, kind: MsgKind, payload: dict | None = None):
        """Attempt a send on behalf of ``src``; used by policy audits."""
        return self.net.send(self.net.message(src, dst, kind, payload or {}))

    # -- exchanges -----------------------------------------------------------------
    def start_exchange(self, master: EntityId | str, slave: EntityId | str, number: int = 1,
                       size_bits: int = 256, *, notify: bool = True) -> ExchangeRecord:
        """Have ``master`` request keys for ``slave``. With ``notify`` the slave is
        told out of band and fetches the same keys itself."""
        self.start()
        master, slave = EntityId.parse(str(master)), EntityId.parse(str(slave))
        rec = ExchangeRecord(self._exchange_ids.new(), master, slave, number, size_bits,
                             self.net.now, notify=notify)
        self.records.append(rec)
        self.saes[master].request(rec)
        return rec

    def run_exchange(self, master, slave, number: int = 1, size_bits: int = 256,
                     timeout: float | None = None) -> ExchangeRecord:
        rec = self.start_exchange(master, slave, number, size_bits)
        self.wait([rec], timeout)
        return rec

    def wait_for(self, predicate: Callable[[], bool], timeout: float) -> bool:
        self.start()
        return self.net.run_until(predicate, t_max=self.net.now + timeout)

    def wait(self, records: list[ExchangeRecord], timeout: float | None = None) -> bool:
        limit = self.net.now + (timeout or self.cfg["kms"]["session_timeout_s"] + 5.0)
        ok = self.net.run_until(lambda: all(r.done for r in records), t_max=limit)
        for r in records:
            if not r.done:
                r.reason = "TIMEOUT"
        return ok

    def run_exchanges(self, n: int, master, slave, *, number: int = 1, size_bits: int = 256,
                      concurrency: int = 1, gap: float = 0.0) -> list[ExchangeRecord]:
        out: list[ExchangeRecord] = []
        while len(out) < n:
            batch = [self.start_exchange(master, slave, number, size_bits)
                     for _ in range(min(concurrency, n - len(out)))]
            self.wait(batch)
            out.extend(batch)
            if gap:
                self.advance(gap)
        return out

    def advance(self, dt: float) -> None:
        if isinstance(self.net, SimTransport):
            self.net.advance_clock(dt)
        else:
            self.net.run_until(None, t_max=self.net.now + dt)

    def all_stores(self) -> list[KeyStore]:
        return [self.stores[k] for k in sorted(self.stores)] + \
               [self.session_stores[k] for k in sorted(self.session_stores)]

    def close(self) -> None:
        if isinstance(self.net, SocketTransport):
            self.net.close()


def telemetry_week(cfg: dict, seed: int | None = None, days: float = 7.0,
                   sample_s: float = 30.0) -> dict[str, dict[str, float]]:
    """Sample every configured link for ``days`` at ``sample_s`` without
    materializing key bytes; returns per-link mean/std of SKR (kb/s) and QBER (%)."""
    cfg = validate_config(cfg)
    seed = cfg["seed"] if seed is None else seed
    steps = int(round(days * 86400 / sample_s))
    out = {}
    for spec in sorted(cfg["links"], key=lambda s: s["id"]):
        link = QkdLink(spec["id"], EntityId(Kind.QKD_MODULE, spec["id"] + "@a"),
                       EntityId(Kind.QKD_MODULE, spec["id"] + "@b"), spec["skr_bps"],
                       spec.get("skr_jitter", 0.0), spec["qber_pct"], spec.get("qber_jitter", 0.0),
                       seed=derive_seed(seed, "link:" + spec["id"]))
        skr = np.empty(steps)
        qber = np.empty(steps)
        for i in range(steps):
            r = tick(link, sample_s, materialize=False)
            skr[i] = r.telemetry.skr_bps / 1000.0
            qber[i] = r.telemetry.qber_pct
        out[spec["id"]] = {"skr_mean": float(skr.mean()), "skr_std": float(skr.std(ddof=1)),
                           "qber_mean": float(qber.mean()), "qber_std": float(qber.std(ddof=1)),
                           "samples": steps}
    return out
