"""Network controller: link-state ingestion, weight-optimal path
computation and sequential route installation.

Weights are exact rationals so equal-cost ties, and scaling invariance, are
decided exactly rather than by float rounding.
"""

from __future__ import annotations

import heapq
import itertools
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Hashable, Iterable, Mapping

from .actor import Actor, AlarmKind, Severity
from .domain import EntityId, Kind, MsgKind, ProtocolMessage, QkdnError, eid


class NoPath(QkdnError):
    code = "NO_PATH"


def _frac(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(str(x)) if isinstance(x, float) else Fraction(x)


@dataclass(frozen=True)
class WeightParams:
    w_fixed: Fraction = Fraction(1)
    alpha: Fraction = Fraction(10 ** 5)
    beta: Fraction = Fraction(10 ** 4)
    epsilon: Fraction = Fraction(1)

    @classmethod
    def from_config(cls, data: Mapping) -> WeightParams:
        return cls(*(_frac(data.get(k, getattr(cls, k))) for k in
                     ("w_fixed", "alpha", "beta", "epsilon")))


def link_weight(available_bits, refill_rate_bps, params: WeightParams = WeightParams()) -> Fraction:
    """Fixed cost plus penalties for scarce stock and slow refill."""
    avail = max(_frac(available_bits), Fraction(1))
    rate = max(_frac(refill_rate_bps), params.epsilon)
    return params.w_fixed + params.alpha / avail + params.beta / rate


def compute_path(graph: Mapping[Hashable, Mapping[Hashable, Fraction]], src, dst,
                 key=str) -> tuple[Fraction, tuple]:
    """Minimum-weight simple path; equal weights resolve to the lexicographically
    smallest node sequence (compared via ``key``).

    Labels are (distance, path) pairs. With positive weights a label-setting
    search over this order is exact: extending two equal-distance prefixes by
    the same suffix preserves their lexicographic order.
    """
    if src not in graph or dst not in graph:
        raise NoPath(detail=f"{src} or {dst} not in topology")
    start = (Fraction(0), (key(src),), (src,))
    heap = [start]
    settled: set = set()
    while heap:
        dist, keys, path = heapq.heappop(heap)
        node = path[-1]
        if node in settled:
            continue
        settled.add(node)
        if node == dst:
            return dist, path
        for nbr, w in graph[node].items():
            if nbr not in settled and nbr not in path:
                heapq.heappush(heap, (dist + w, keys + (key(nbr),), path + (nbr,)))
    raise NoPath(detail=f"{src} -> {dst}")


class AdminState:
    UP = "UP"
    DOWN = "DOWN"


@dataclass
class LinkState:
    link_id: str
    endpoints: tuple[EntityId, EntityId]
    admin_state: str = AdminState.UP
    reports: dict[EntityId, tuple[int, float, float]] = field(default_factory=dict)

    @property
    def available_bits(self) -> int:
        return min((r[0] for r in self.reports.values()), default=0)

    @property
    def refill_rate_bps(self) -> float:
        return min((r[1] for r in self.reports.values()), default=0.0)

    @property
    def last_update(self) -> float | None:
        if len(self.reports) < 2:
            return None
        return min(r[2] for r in self.reports.values())

    def weight(self, params: WeightParams) -> Fraction:
        return link_weight(self.available_bits, self.refill_rate_bps, params)

    def to_dict(self, params: WeightParams, usable: bool) -> dict:
        return {"link_id": self.link_id, "endpoints": [str(e) for e in self.endpoints],
                "available_bits": self.available_bits, "refill_rate_bps": self.refill_rate_bps,
                "admin_state": self.admin_state, "last_update": self.last_update,
                "usable": usable, "weight": float(self.weight(params))}


@dataclass(frozen=True)
class PathComputation:
    src: EntityId
    dst: EntityId
    path: tuple[EntityId, ...]
    total_weight: Fraction
    computed_at: float

    def to_dict(self) -> dict:
        return {"src": str(self.src), "dst": str(self.dst), "path": [str(p) for p in self.path],
                "total_weight": float(self.total_weight), "computed_at": self.computed_at}


@dataclass
class _Install:
    install_id: int
    path: PathComputation
    correlation_id: str
    initiator: EntityId
    steps: list[tuple[EntityId, EntityId, EntityId | None]]
    index: int = 0
    previous: list[tuple[EntityId, bool, EntityId | None]] = field(default_factory=list)
    timer: object = None

    @property
    def nodes(self) -> set[EntityId]:
        return set(self.path.path)


class Controller(Actor):
    def __init__(self, eid_: EntityId, net, *,
                 links: Iterable[tuple[str, EntityId, EntityId, str]],
                 params: WeightParams = WeightParams(), status_interval: float = 30.0,
                 install_timeout: float = 0.5, manager: EntityId | None = None,
                 proactive: bool = False, history: int = 100) -> None:
        super().__init__(eid_, net, manager)
        self.params = params
        self.status_interval = status_interval
        self.install_timeout = install_timeout
        self.proactive = proactive
        self.links: dict[str, LinkState] = {}
        self.adjacency: dict[tuple[EntityId, EntityId], str] = {}
        self.registered: set[EntityId] = set()
        for link_id, a, b, state in links:
            self.links[link_id] = LinkState(link_id, (a, b), state)
            self.adjacency[(a, b)] = self.adjacency[(b, a)] = link_id
            self.registered.update((a, b))
        self.recent: deque[PathComputation] = deque(maxlen=history)
        self.installed: dict[EntityId, dict[EntityId, EntityId | None]] = {}
        self.active: dict[int, _Install] = {}
        self.queued: deque[_Install] = deque()
        self._ids = itertools.count(1)

    # -- telemetry ------------------------------------------------------------
    def ingest_status(self, sender: EntityId, links: list[dict], t: float | None = None) -> None:
        if sender not in self.registered or sender.kind is not Kind.CKMS:
            self.alarm(AlarmKind.UNKNOWN_SENDER, detail=str(sender))
            raise QkdnError("UNKNOWN_SENDER", str(sender))
        t = self.net.now if t is None else t
        for entry in links:
            link_id = self.adjacency.get((sender, eid(entry["peer"])))
            if link_id is None:
                continue
            self.links[link_id].reports[sender] = (int(entry["available_bits"]),
                                                   float(entry["refill_rate_bps"]), t)

    def on_status_update(self, msg: ProtocolMessage) -> None:
        try:
            self.ingest_status(msg.src, msg.payload.get("links", []))
        except QkdnError:
            pass

    def set_admin_state(self, link_id: str, state: str) -> None:
        if link_id in self.links:
            self.links[link_id].admin_state = state

    def on_alarm(self, msg: ProtocolMessage) -> None:
        kind = msg.payload.get("kind")
        link_id = msg.payload.get("link_id") or msg.payload.get("detail")
        if kind == AlarmKind.LINK_DOWN.value:
            self.set_admin_state(link_id, AdminState.DOWN)
        elif kind == AlarmKind.LINK_UP.value:
            self.set_admin_state(link_id, AdminState.UP)

    def usable(self, link: LinkState) -> bool:
        if link.admin_state != AdminState.UP:
            return False
        last = link.last_update
        return last is not None and self.net.now - last <= 3 * self.status_interval

    def graph(self) -> dict[EntityId, dict[EntityId, Fraction]]:
        g: dict[EntityId, dict[EntityId, Fraction]] = {n: {} for n in self.registered}
        for link in self.links.values():
            if self.usable(link):
                a, b = link.endpoints
                w = link.weight(self.params)
                g[a][b] = g[b][a] = w
        return g

    # -- paths ----------------------------------------------------------------
    def compute_path(self, src: EntityId, dst: EntityId) -> PathComputation:
        total, path = compute_path(self.graph(), src, dst)
        pc = PathComputation(src, dst, path, total, self.net.now)
        self.recent.append(pc)
        return pc

    def on_route_request(self, msg: ProtocolMessage) -> None:
        src, dst = eid(msg.payload["src"]), eid(msg.payload["dst"])
        try:
            pc = self.compute_path(src, dst)
        except NoPath:
            self.send(msg.src, MsgKind.ROUTE_ACK, {"ok": False, "reason": "NO_PATH"},
                      msg.correlation_id)
            return
        self.install_path(pc, msg.correlation_id, msg.src)

    def install_path(self, pc: PathComputation, correlation_id: str, initiator: EntityId) -> _Install:
        """Install entries node by node in path order; ACK the initiator only
        after every node confirmed, roll back on the first timeout."""
        path = pc.path
        steps = [(node, pc.dst, path[i + 1] if i + 1 < len(path) else None)
                 for i, node in enumerate(path)]
        inst = _Install(next(self._ids), pc, correlation_id, initiator, steps)
        if any(inst.nodes & other.nodes for other in self.active.values()):
            self.queued.append(inst)
        else:
            self._start(inst)
        return inst

    def _start(self, inst: _Install) -> None:
        self.active[inst.install_id] = inst
        self._step(inst)

    def _step(self, inst: _Install) -> None:
        if inst.index == len(inst.steps):
            self._complete(inst, True)
            return
        node, dest, nxt = inst.steps[inst.index]
        table = self.installed.setdefault(node, {})
        inst.previous.append((node, dest in table, table.get(dest)))
        receipt = self.send(node, MsgKind.ROUTE_UPDATE,
                            {"dest": str(dest), "next_hop": str(nxt) if nxt else None,
                             "install_id": inst.install_id}, inst.correlation_id)
        if not receipt:
            inst.previous.pop()
            self._rollback(inst)
            return
        inst.timer = self.net.schedule(self.install_timeout, lambda: self._timeout(inst))

    def on_route_ack(self, msg: ProtocolMessage) -> None:
        inst = self.active.get(msg.payload.get("install_id"))
        if inst is None or inst.index >= len(inst.steps):
            return
        node, dest, nxt = inst.steps[inst.index]
        if msg.src != node:
            return
        inst.timer.cancel()
        if not msg.payload.get("ok"):
            self._rollback(inst)
            return
        self.installed.setdefault(node, {})[dest] = nxt
        inst.index += 1
        self._step(inst)

    def _timeout(self, inst: _Install) -> None:
        if inst.install_id in self.active:
            self.alarm(AlarmKind.INSTALL_TIMEOUT, Severity.WARN,
                       str(inst.steps[inst.index][0]))
            self._rollback(inst)

    def _rollback(self, inst: _Install) -> None:
        # The node that did not confirm may or may not have applied the entry;
        # restore it too so the path leaves no residue.
        for node, had, prev in reversed(inst.previous):
            dest = inst.path.dst
            table = self.installed.setdefault(node, {})
            if had:
                table[dest] = prev
            else:
                table.pop(dest, None)
            self.send(node, MsgKind.ROUTE_UPDATE,
                      {"dest": str(dest), "next_hop": str(prev) if prev else None,
                       "remove": not had, "install_id": None}, inst.correlation_id)
        self._complete(inst, False)

    def _complete(self, inst: _Install, ok: bool) -> None:
        self.active.pop(inst.install_id, None)
        payload = {"ok": True, "path": [str(p) for p in inst.path.path]} if ok else \
            {"ok": False, "reason": "NO_PATH", "detail": "INSTALL_TIMEOUT"}
        self.send(inst.initiator, MsgKind.ROUTE_ACK, payload, inst.correlation_id)
        waiting = list(self.queued)
        self.queued.clear()
        for other in waiting:
            if any(other.nodes & a.nodes for a in self.active.values()):
                self.queued.append(other)
            else:
                self._start(other)

    # -- monitoring views -------------------------------------------------------
    def links_view(self) -> list[dict]:
        return [self.links[k].to_dict(self.params, self.usable(self.links[k]))
                for k in sorted(self.links)]

    def paths_view(self) -> list[dict]:
        return [p.to_dict() for p in self.recent]
