"""Simulated QKD module pairs.

Each link emits identical key blocks at both endpoints at a configured
secret-key rate, with SKR/QBER telemetry drawn from clamped Gaussians.
QBER never touches key material: the rate is already post-distillation.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, TextIO

import numpy as np

from .domain import (CapacityExceeded, EntityId, IdSource, KeyBlock, KeyRole, KeyStore, Lane,
                     Origin)

BLOCK_BITS = 256


class LinkState(str, Enum):
    UP = "UP"
    DOWN = "DOWN"


@dataclass(frozen=True)
class Telemetry:
    timestamp: float
    link_id: str
    skr_bps: float
    qber_pct: float
    state: LinkState

    def row(self) -> list:
        return [f"{self.timestamp:.3f}", self.link_id, f"{self.skr_bps:.3f}",
                f"{self.qber_pct:.4f}", self.state.value]


@dataclass
class TickResult:
    blocks_a: list[KeyBlock]
    blocks_b: list[KeyBlock]
    first_seq: int
    telemetry: Telemetry
    emitted_bits: int


@dataclass
class QkdLink:
    link_id: str
    endpoint_a: EntityId
    endpoint_b: EntityId
    skr_bps: float
    skr_jitter: float = 0.0
    qber_pct: float = 0.0
    qber_jitter: float = 0.0
    state: LinkState = LinkState.UP
    seed: int = 0
    block_bits: int = BLOCK_BITS
    now: float = 0.0
    carry_bits: float = 0.0
    seq: int = 0
    _telemetry_rng: np.random.Generator = field(init=False, repr=False)
    _key_rng: np.random.Generator = field(init=False, repr=False)
    _ids: IdSource = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.skr_bps < 0:
            raise ValueError("skr_bps must be >= 0")
        if not 0 <= self.qber_pct <= 50:
            raise ValueError("qber_pct must lie in [0, 50]")
        self.state = LinkState(self.state)
        root = np.random.SeedSequence([self.seed, _stable_hash(self.link_id)])
        tel, key, ids = root.spawn(3)
        self._telemetry_rng = np.random.default_rng(tel)
        self._key_rng = np.random.default_rng(key)
        self._ids = IdSource(int(ids.generate_state(1)[0]))

    def sample_telemetry(self) -> tuple[float, float]:
        skr = max(0.0, self._telemetry_rng.normal(self.skr_bps, self.skr_bps * self.skr_jitter))
        qber = min(50.0, max(0.0, self._telemetry_rng.normal(self.qber_pct, self.qber_jitter)))
        return float(skr), float(qber)

    def make_blocks(self, count: int, block_bits: int, created_at: float) -> tuple[list, list]:
        origin = Origin.link(self.link_id)
        a, b = [], []
        raw = self._key_rng.bytes(count * block_bits // 8)
        step = block_bits // 8
        for i in range(count):
            bits = raw[i * step:(i + 1) * step]
            key_id = self._ids.new()
            a.append(KeyBlock(key_id, bits, origin, KeyRole.KMA, created_at))
            b.append(KeyBlock(key_id, bits, origin, KeyRole.KMA, created_at))
        return a, b

    def lane_of(self, endpoint: EntityId, seq: int) -> Lane:
        """Even blocks are A's to send with, odd blocks are B's."""
        a_sends = seq % 2 == 0
        if endpoint == self.endpoint_a:
            return Lane.TX if a_sends else Lane.RX
        return Lane.RX if a_sends else Lane.TX


def _stable_hash(text: str) -> int:
    h = 0
    for ch in text.encode():
        h = (h * 131 + ch) % (1 << 61)
    return h


def tick(link: QkdLink, dt: float, *, materialize: bool = True) -> TickResult:
    """Advance ``link`` by ``dt`` seconds.

    Whole blocks of ``link.block_bits`` are emitted and the fractional rest is
    carried. ``materialize=False`` skips generating key bytes (telemetry runs).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    link.now += dt
    skr, qber = link.sample_telemetry()
    first_seq = link.seq
    if link.state is LinkState.DOWN:
        return TickResult([], [], first_seq, Telemetry(link.now, link.link_id, 0.0, qber,
                                                        link.state), 0)
    link.carry_bits += skr * dt
    count = int(link.carry_bits // link.block_bits)
    link.carry_bits -= count * link.block_bits
    blocks_a: list[KeyBlock] = []
    blocks_b: list[KeyBlock] = []
    if materialize and count:
        blocks_a, blocks_b = link.make_blocks(count, link.block_bits, link.now)
    link.seq += count
    return TickResult(blocks_a, blocks_b, first_seq,
                      Telemetry(link.now, link.link_id, skr, qber, link.state),
                      count * link.block_bits)


def set_state(link: QkdLink, state: LinkState | str,
              notify: Callable[[QkdLink, LinkState], None] | None = None) -> QkdLink:
    """Change the link state; takes effect from the next tick. ``notify`` is
    told about real transitions (the network turns them into ALARMs)."""
    state = LinkState(state)
    changed = state is not link.state
    link.state = state
    if changed and notify is not None:
        notify(link, state)
    return link


def deliver_to_kms(endpoint: EntityId, blocks: list[KeyBlock], store: KeyStore, peer: EntityId,
                   lanes: list[Lane] | None = None) -> int:
    """Refill one endpoint's KMS pool; returns the number of dropped blocks."""
    dropped = 0
    for i, block in enumerate(blocks):
        lane = lanes[i] if lanes else Lane.TX
        try:
            store.refill(peer, block, lane)
        except CapacityExceeded:
            dropped += 1
    return dropped


def deliver_pair(link: QkdLink, result: TickResult, store_a: KeyStore, peer_a: EntityId,
                 store_b: KeyStore, peer_b: EntityId) -> int:
    """Refill both endpoints, dropping a block at both ends if either is full
    so the two pools never diverge."""
    dropped = 0
    for i, (blk_a, blk_b) in enumerate(zip(result.blocks_a, result.blocks_b)):
        seq = result.first_seq + i
        if not (store_a.has_room(peer_a, blk_a.n_bits) and store_b.has_room(peer_b, blk_b.n_bits)):
            store_a.record_drop(peer_a, blk_a.n_bits)
            store_b.record_drop(peer_b, blk_b.n_bits)
            dropped += 1
            continue
        store_a.refill(peer_a, blk_a, link.lane_of(link.endpoint_a, seq))
        store_b.refill(peer_b, blk_b, link.lane_of(link.endpoint_b, seq))
    return dropped


def prefill(link: QkdLink, store_a: KeyStore, peer_a: EntityId, store_b: KeyStore,
            peer_b: EntityId, bits_per_lane: int, block_bits: int = 1 << 16) -> None:
    """Populate both lanes of both pools with ``bits_per_lane`` of shared material,
    standing in for a link that has been running long enough to fill its buffers."""
    count = -(-bits_per_lane // block_bits) * 2
    blocks_a, blocks_b = link.make_blocks(count, block_bits, link.now)
    for i, (blk_a, blk_b) in enumerate(zip(blocks_a, blocks_b)):
        seq = link.seq + i
        store_a.refill(peer_a, blk_a, link.lane_of(link.endpoint_a, seq))
        store_b.refill(peer_b, blk_b, link.lane_of(link.endpoint_b, seq))
    link.seq += count


class TelemetryCsv:
    """Append-only ``timestamp,link_id,skr_bps,qber_pct,state`` stream."""

    header = ["timestamp", "link_id", "skr_bps", "qber_pct", "state"]

    def __init__(self, out: TextIO | None = None) -> None:
        self.out = out if out is not None else io.StringIO()
        self._writer = csv.writer(self.out, lineterminator="\n")
        self._writer.writerow(self.header)

    def append(self, t: Telemetry) -> None:
        self._writer.writerow(t.row())
