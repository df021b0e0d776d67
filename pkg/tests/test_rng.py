from __future__ import annotations

import numpy as np
import pytest

from qkdn.rng import (Health, HmacDrbg, HybridRng, OsEntropySource, RepetitionCountTest,
                      monobit_test, runs_test, statistical_battery, unpack_bits)


def test_seeded_output_is_reproducible():
    a, b = HybridRng(42), HybridRng(42)
    assert [a.generate(256) for _ in range(5)] == [b.generate(256) for _ in range(5)]
    assert HybridRng(43).generate(256) != HybridRng(42).generate(256)
    assert len(HybridRng(1).generate(256)) == 32


def test_rejects_partial_octets():
    with pytest.raises(ValueError):
        HybridRng(1).generate(12)
    with pytest.raises(ValueError):
        HybridRng(1).generate(0)


def test_health_report_counts():
    rng = HybridRng(3)
    assert rng.health_report().as_dict() == {"health": "OK", "reseed_count": 0, "bits_emitted": 0}
    for _ in range(4):
        rng.generate(256)
    assert rng.health_report().bits_emitted == 1024


def test_source_failure_is_fail_safe():
    calls = []
    rng = HybridRng(5, on_degraded=lambda: calls.append(1))
    rng.fail_source()
    out = rng.generate(256)
    assert len(out) == 32
    assert rng.health_report().health is Health.DEGRADED
    rng.generate(256)
    assert calls == [1]


@pytest.mark.slow
def test_output_passes_statistical_battery():
    rng = HybridRng(2024)
    data = b"".join(rng.generate(8) for _ in range(1_000_000))
    ones = unpack_bits(data).mean()
    assert abs(ones - 0.5) <= 0.01
    assert statistical_battery(data)["passed"]


def test_degraded_stream_still_passes_battery():
    rng = HybridRng(11)
    rng.fail_source()
    data = rng.generate(2_000_000)
    assert rng.health is Health.DEGRADED
    assert statistical_battery(data)["passed"]


def test_stuck_source_is_detected():
    rng = HybridRng(9)
    rng.generate(256)
    assert rng.health is Health.OK
    rng.source.stuck = True
    out = rng.generate(256)
    assert rng.health is Health.DEGRADED
    assert out != bytes(32)
    # a constant stream fails the battery that the healthy output passes
    assert not statistical_battery(bytes(125_000))["passed"]


def test_repetition_count_cutoff():
    rct = RepetitionCountTest(cutoff=4)
    assert rct.feed(b"\x01\x01\x01\x02")
    assert not rct.feed(b"\x02\x02\x02")


def test_reseed_counter_is_monotonic():
    rng = HybridRng(1, reseed_interval=2)
    seen = []
    for _ in range(9):
        rng.generate(64)
        seen.append(rng.reseed_count)
    assert seen == sorted(seen) and seen[-1] == 4


def test_live_mode_hook():
    rng = HybridRng(source=OsEntropySource())
    assert len(rng.generate(128)) == 16 and rng.health is Health.OK


def test_drbg_is_deterministic_per_instantiation():
    a = HmacDrbg(b"e" * 32, b"n", b"p")
    b = HmacDrbg(b"e" * 32, b"n", b"p")
    assert a.generate(64) == b.generate(64)
    assert HmacDrbg(b"f" * 32).generate(32) != HmacDrbg(b"e" * 32).generate(32)


def test_statistic_helpers_on_known_sequences():
    alternating = np.array([0, 1] * 500, dtype=np.uint8)
    assert monobit_test(alternating) == pytest.approx(1.0)
    # perfectly alternating bits have far too many runs
    assert runs_test(alternating) < 1e-6
    assert runs_test(np.ones(1000, dtype=np.uint8)) == 0.0
