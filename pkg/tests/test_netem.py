import json
import random

import numpy as np
import pytest

from panoteleop.netem import (
    BURST_BYTES,
    ImpairmentTimeline,
    NetworkProfile,
    PRESETS,
    impair,
    load_profile,
    save_profile,
)


def test_profile_validation():
    with pytest.raises(ValueError):
        NetworkProfile(base_delay_ms=-1)
    with pytest.raises(ValueError):
        NetworkProfile(jitter_stddev_ms=-0.1)


def test_pure_base_delay_is_exact():
    profile = NetworkProfile("d", base_delay_ms=100.0)
    events = [(i * 0.05, 1000) for i in range(50)]
    out = impair(events, profile)
    for (t_send, _), (t_deliver, _) in zip(events, out):
        assert t_deliver == pytest.approx(t_send + 0.100, abs=1e-12)


def test_serialization_delay_arithmetic():
    # 8 Mbps link, one 1 MB frame: 8e6 bits / 8e6 bps = 1.000 s
    profile = NetworkProfile("bw", bandwidth_kbps=8000.0)
    out = impair([(0.0, 1_000_000)], profile)
    assert out[0][0] == pytest.approx(1.000, abs=1e-9)


def test_order_preserved_10k_random_messages():
    rng = random.Random(3)
    profile = NetworkProfile("mixed", base_delay_ms=20.0, jitter_stddev_ms=15.0,
                             bandwidth_kbps=5000.0)
    t = 0.0
    events = []
    for i in range(10_000):
        t += rng.uniform(0, 0.004)
        events.append((t, rng.randint(1, 20_000)))
    out = impair(events, profile, random.Random(7))
    deliveries = [d for d, _ in out]
    assert deliveries == sorted(deliveries)
    # never before t_send + base
    for (t_send, _), d in zip(events, deliveries):
        assert d >= t_send + 0.020 - 1e-12


def test_jitter_clamped_nonnegative_and_seeded():
    profile = NetworkProfile("j", base_delay_ms=10.0, jitter_stddev_ms=50.0)
    out1 = impair([(i * 1.0, 10) for i in range(200)], profile, random.Random(5))
    out2 = impair([(i * 1.0, 10) for i in range(200)], profile, random.Random(5))
    assert out1 == out2
    for (t_send, _), (t_deliver, _) in zip([(i * 1.0, 10) for i in range(200)], out1):
        assert t_deliver >= t_send + 0.010 - 1e-12


def test_token_bucket_long_run_throughput():
    profile = NetworkProfile("tb", bandwidth_kbps=2000.0)   # 250 kB/s
    rng = random.Random(11)
    sizes = [rng.randint(500, 30_000) for _ in range(3000)]
    events = [(0.0, s) for s in sizes]                       # all queued at once
    out = impair(events, profile)
    total = sum(sizes)
    elapsed = out[-1][0]
    throughput = total / elapsed
    assert throughput <= 250_000 * 1.01
    assert throughput >= 250_000 * 0.99


def test_token_bucket_burst_after_idle():
    profile = NetworkProfile("tb", bandwidth_kbps=8000.0)    # 1 MB/s
    tl = ImpairmentTimeline(profile)
    assert tl.schedule(0.0, 1000) == pytest.approx(0.001)    # empty bucket pays
    # after one second idle the bucket holds min(burst, 1 MB) = 128 KiB
    t = tl.schedule(2.0, BURST_BYTES)
    assert t == pytest.approx(2.0, abs=1e-9)                 # free burst
    t = tl.schedule(2.0, 1000)
    assert t == pytest.approx(2.001, abs=1e-9)               # bucket drained again


def test_presets_exist_with_expected_bases():
    assert PRESETS["office"].base_delay_ms == 160.0
    assert PRESETS["laboratory"].base_delay_ms == 205.0
    assert PRESETS["outdoor"].base_delay_ms == 370.0
    assert PRESETS["outdoor"].jitter_stddev_ms == 25.0


def test_profile_json_round_trip(tmp_path):
    p = NetworkProfile("custom", 42.0, 3.0, 1234.0)
    path = tmp_path / "p.json"
    save_profile(p, path)
    assert load_profile(path) == p
    assert load_profile("office") == PRESETS["office"]
    data = json.loads(path.read_text())
    assert set(data) == {"name", "base_delay_ms", "jitter_stddev_ms", "bandwidth_kbps"}
