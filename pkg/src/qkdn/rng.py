"""Hybrid random generator: a physical entropy stand-in feeding an HMAC-DRBG.

Fresh source entropy is mixed into every request. If the source fails its
health test (or is switched off), output continues from the DRBG alone and
the instance reports ``DEGRADED``.
"""

from __future__ import annotations

import hashlib
import hmac
import math
import os
import random
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Protocol

import numpy as np


class Health(str, Enum):
    OK = "OK"
    DEGRADED = "DEGRADED"


class EntropySourceFailure(RuntimeError):
    pass


class EntropySource(Protocol):
    def read(self, n: int) -> bytes: ...


class SimulatedPhysicalSource:
    """Seeded byte stream standing in for a physical noise source."""

    def __init__(self, seed: int) -> None:
        self.seed = seed
        self._rng = random.Random(seed)
        self.failed = False
        self.stuck = False

    def read(self, n: int) -> bytes:
        if self.failed:
            raise EntropySourceFailure("entropy source offline")
        if self.stuck:
            return b"\x00" * n
        return self._rng.randbytes(n)


class OsEntropySource:
    """Live-mode hook: the operating system's entropy device."""

    def read(self, n: int) -> bytes:
        return os.urandom(n)


class HmacDrbg:
    """HMAC_DRBG with SHA-256 (NIST SP 800-90A, no prediction resistance)."""

    outlen = 32
    reseed_limit = 1 << 48

    def __init__(self, entropy: bytes, nonce: bytes = b"", personalization: bytes = b"") -> None:
        self.key = b"\x00" * self.outlen
        self.value = b"\x01" * self.outlen
        self._update(entropy + nonce + personalization)
        self.reseed_counter = 1

    def _hmac(self, key: bytes, data: bytes) -> bytes:
        return hmac.digest(key, data, "sha256")

    def _update(self, provided: bytes = b"") -> None:
        self.key = self._hmac(self.key, self.value + b"\x00" + provided)
        self.value = self._hmac(self.key, self.value)
        if provided:
            self.key = self._hmac(self.key, self.value + b"\x01" + provided)
            self.value = self._hmac(self.key, self.value)

    def reseed(self, entropy: bytes, additional: bytes = b"") -> None:
        self._update(entropy + additional)
        self.reseed_counter = 1

    def generate(self, n: int, additional: bytes = b"") -> bytes:
        if self.reseed_counter > self.reseed_limit:
            raise RuntimeError("reseed required")
        if additional:
            self._update(additional)
        out = bytearray()
        while len(out) < n:
            self.value = self._hmac(self.key, self.value)
            out += self.value
        self._update(additional)
        self.reseed_counter += 1
        return bytes(out[:n])


class RepetitionCountTest:
    """Continuous health test on source output: flags a byte value repeated
    ``cutoff`` times in a row (SP 800-90B style, byte symbols)."""

    def __init__(self, cutoff: int = 6) -> None:
        self.cutoff = cutoff
        self._last: int | None = None
        self._run = 0

    def feed(self, data: bytes) -> bool:
        for b in data:
            if b == self._last:
                self._run += 1
                if self._run >= self.cutoff:
                    return False
            else:
                self._last, self._run = b, 1
        return True


@dataclass(frozen=True)
class HealthReport:
    health: Health
    reseed_count: int
    bits_emitted: int

    def as_dict(self) -> dict:
        return {"health": self.health.value, "reseed_count": self.reseed_count,
                "bits_emitted": self.bits_emitted}


class HybridRng:
    """PTG.3-shaped generator.

    ``seed`` selects the simulated source; pass ``source=OsEntropySource()``
    for live mode. ``on_degraded`` fires once when the source is lost.
    """

    def __init__(self, seed: int | None = None, *, source: EntropySource | None = None,
                 reseed_interval: int = 4096,
                 on_degraded: Callable[[], None] | None = None) -> None:
        if source is None:
            source = SimulatedPhysicalSource(0 if seed is None else seed)
        self.source = source
        self.reseed_interval = reseed_interval
        self.on_degraded = on_degraded
        self.health = Health.OK
        self.reseed_count = 0
        self.bits_emitted = 0
        self._requests = 0
        self._rct = RepetitionCountTest()
        self._lock = threading.Lock()
        entropy = self._draw(48)
        if entropy is None:
            # Fail-safe boot: the DRBG still needs a deterministic instantiation.
            entropy = hashlib.sha256(repr(seed).encode()).digest()
        self._drbg = HmacDrbg(entropy, personalization=b"qkdn-hybrid-rng")

    def _draw(self, n: int) -> bytes | None:
        if self.health is Health.DEGRADED:
            return None
        try:
            data = self.source.read(n)
        except EntropySourceFailure:
            data = None
        if data is None or not self._rct.feed(data):
            self._degrade()
            return None
        return data

    def _degrade(self) -> None:
        if self.health is Health.OK:
            self.health = Health.DEGRADED
            if self.on_degraded is not None:
                self.on_degraded()

    def fail_source(self) -> None:
        """Fault injection: take the physical source offline."""
        if isinstance(self.source, SimulatedPhysicalSource):
            self.source.failed = True
        else:
            self._degrade()

    def generate(self, n_bits: int) -> bytes:
        if n_bits <= 0 or n_bits % 8:
            raise ValueError("n_bits must be a positive multiple of 8")
        n = n_bits // 8
        with self._lock:
            self._requests += 1
            if self._requests % self.reseed_interval == 0:
                fresh = self._draw(48)
                if fresh is not None:
                    self._drbg.reseed(fresh)
                    self.reseed_count += 1
            mixed = self._draw(n) or b""
            out = self._drbg.generate(n, mixed)
            self.bits_emitted += n_bits
            return out

    def health_report(self) -> HealthReport:
        with self._lock:
            return HealthReport(self.health, self.reseed_count, self.bits_emitted)


def unpack_bits(data: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8))


def monobit_test(bits: np.ndarray) -> float:
    """Frequency (monobit) test p-value."""
    n = bits.size
    s = abs(2 * int(bits.sum()) - n)
    return math.erfc(s / math.sqrt(2 * n))


def runs_test(bits: np.ndarray) -> float:
    """Runs test p-value; 0.0 when the frequency prerequisite fails."""
    n = bits.size
    pi = bits.mean()
    if abs(pi - 0.5) >= 2 / math.sqrt(n):
        return 0.0
    runs = 1 + int(np.count_nonzero(bits[1:] != bits[:-1]))
    num = abs(runs - 2 * n * pi * (1 - pi))
    return math.erfc(num / (2 * math.sqrt(2 * n) * pi * (1 - pi)))


def statistical_battery(data: bytes, alpha: float = 0.01, window_bits: int = 1_000_000) -> dict:
    """Monobit and runs tests over consecutive windows; passes when every window
    clears ``alpha``."""
    bits = unpack_bits(data)
    windows = []
    for start in range(0, bits.size - window_bits + 1, window_bits):
        w = bits[start:start + window_bits]
        windows.append({"monobit_p": monobit_test(w), "runs_p": runs_test(w),
                        "ones_fraction": float(w.mean())})
    passed = bool(windows) and all(
        w["monobit_p"] >= alpha and w["runs_p"] >= alpha for w in windows)
    return {"passed": passed, "windows": windows}
