"""Benchmark engines and the statistics/CSV contract."""

import csv
import math
import random
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boxer import bench
from boxer.bench import (
    SimOverlay,
    fanin_sim,
    latency_sim,
    summarize,
    throughput_sim,
    ttfb_sim,
    write_ecdf,
    write_raw,
    write_summary,
)

DELAY_US = 100.0


# -- statistics ----------------------------------------------------------------


def _assert_matches_numpy(values):
    rec = summarize("broker", "x", values)
    arr = np.array(values, dtype=float)
    assert rec.min == arr.min()
    assert rec.max == arr.max()
    assert rec.median == float(np.median(arr))
    assert math.isclose(rec.mean, float(arr.mean()), rel_tol=1e-9)
    # pstdev runs in exact rationals, numpy in float64; when the spread is
    # tiny next to the magnitude the two legitimately differ below the
    # cancellation noise floor of eps * magnitude
    noise = sys.float_info.epsilon * max(abs(rec.min), abs(rec.max), 1.0)
    assert math.isclose(rec.std, float(arr.std(ddof=0)),
                        rel_tol=1e-9, abs_tol=noise)


def test_summary_matches_numpy_reference():
    rng = random.Random(20260818)
    _assert_matches_numpy([rng.uniform(0.1, 5000.0) for _ in range(4097)])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(min_value=1e-3, max_value=1e9,
                          allow_nan=False, allow_infinity=False),
                min_size=1, max_size=300))
def test_summary_matches_numpy_property(values):
    _assert_matches_numpy(values)


def test_summary_recomputable_from_raw(tmp_path):
    rng = random.Random(7)
    series = {
        "native.ttfb": [rng.uniform(50, 500) for _ in range(257)],
        "broker.ttfb": [rng.uniform(100, 900) for _ in range(257)],
    }
    records = [summarize(*label.split("."), values)
               for label, values in series.items()]
    write_summary(tmp_path / "out.csv", records)
    write_raw(tmp_path / "out.csv.raw", series)

    # read both back and recompute independently
    loaded = {}
    for line in (tmp_path / "out.csv.raw").read_text().splitlines():
        label, value = line.split()
        loaded.setdefault(label, []).append(float(value))
    with open(tmp_path / "out.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["connection_type"] + "." + r["metric"] for r in rows] == \
        list(series.keys())
    for row in rows:
        values = loaded[row["connection_type"] + "." + row["metric"]]
        arr = np.array(values)
        assert float(row["min"]) == arr.min()
        assert float(row["max"]) == arr.max()
        assert float(row["median"]) == float(np.median(arr))
        assert math.isclose(float(row["mean"]), float(arr.mean()), rel_tol=1e-9)
        assert math.isclose(float(row["std"]), float(arr.std(ddof=0)),
                            rel_tol=1e-9)


def test_ecdf_shape(tmp_path):
    write_ecdf(tmp_path / "e.csv", [5.0, 1.0, 3.0, 3.0])
    with open(tmp_path / "e.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["value", "quantile"]
    values = [float(v) for v, _ in rows[1:]]
    quantiles = [float(q) for _, q in rows[1:]]
    assert values == sorted(values)
    assert quantiles == [0.25, 0.5, 0.75, 1.0]


# -- fabric engines -------------------------------------------------------------


def test_ttfb_identity_on_fabric():
    d = DELAY_US
    overlay = SimOverlay(pairs=2, delay_us=d)
    native, fails = ttfb_sim(pairs=2, reps=3, path="native", overlay=overlay)
    assert not fails
    assert set(native) == {3 * d}
    broker, fails = ttfb_sim(pairs=2, reps=3, path="broker", overlay=overlay)
    assert not fails
    assert set(broker) == {5 * d}
    # brokered establishment costs exactly one control round trip extra
    assert set(broker) == {v + 2 * d for v in native}


def test_latency_rtt_is_twice_link_delay():
    values = latency_sim(pairs=1, rounds=16, reps=4, delay_us=DELAY_US)
    assert set(values) == {2 * DELAY_US}
    values = latency_sim(pairs=1, rounds=16, reps=4, path="native",
                         delay_us=DELAY_US)
    assert set(values) == {2 * DELAY_US}


def test_throughput_direction_symmetry():
    overlay = SimOverlay(pairs=2, delay_us=DELAY_US)
    mark = len(overlay.fabric.trace)
    fwd = throughput_sim(pairs=2, rounds=32, direction="forward",
                         overlay=overlay)
    fwd_data = sum(1 for ev in overlay.fabric.trace[mark:] if ev.kind == "DATA")
    mark = len(overlay.fabric.trace)
    rev = throughput_sim(pairs=2, rounds=32, direction="reverse",
                         overlay=overlay)
    rev_data = sum(1 for ev in overlay.fabric.trace[mark:] if ev.kind == "DATA")
    assert fwd == rev
    assert fwd_data == rev_data
    # stop-and-wait over one round trip: msg_size * 8 / (2 * delay)
    expect = bench.MSG_SIZE * 8 / (2 * DELAY_US * 1e-6) / 1e6
    assert fwd == [expect] * 2


def test_throughput_broker_equals_native_on_fabric():
    native = throughput_sim(pairs=1, rounds=32, path="native")
    broker = throughput_sim(pairs=1, rounds=32, path="broker")
    assert native == broker          # data path identical after establishment


def test_fanin_scales_without_degradation():
    overlay = SimOverlay(pairs=4, delay_us=DELAY_US)
    per_sender = {}
    for n in (1, 2, 4, 8):
        per_sender[n] = fanin_sim(n, rounds=32, overlay=overlay) / n
    base = per_sender[1]
    for n, rate in per_sender.items():
        assert abs(rate - base) / base < 0.10, (n, rate, base)


def test_ttfb_counts_failures_instead_of_hiding_them():
    # a destination nobody owns cannot be set up; the rep must be reported
    overlay = SimOverlay(pairs=1)
    agent, host = overlay.agents[0], overlay.hosts[0]
    failures = []
    agent.request_setup(bench.Endpoint(host.ip, 29000),
                        bench.Endpoint("198.51.100.7", 80), failures.append)
    overlay.fabric.drain()
    assert len(failures) == 1


# -- loopback engines (small, wall-clock) ----------------------------------------


@pytest.fixture(scope="module")
def socket_overlay():
    overlay = bench.SocketOverlay()
    yield overlay
    overlay.close()


def test_socket_ttfb_both_paths(socket_overlay):
    native, fails = bench.ttfb_socket(socket_overlay, reps=8, path="native")
    assert not fails and len(native) == 8 and all(v > 0 for v in native)
    broker, fails = bench.ttfb_socket(socket_overlay, reps=8, path="broker")
    assert not fails and len(broker) == 8 and all(v > 0 for v in broker)


def test_socket_latency_reps(socket_overlay):
    values = bench.latency_socket(socket_overlay, rounds=8, reps=5,
                                  path="broker")
    assert len(values) == 5 and all(v > 0 for v in values)


def test_socket_throughput_same_ballpark(socket_overlay):
    native = bench.throughput_socket(socket_overlay, 0.3, path="native")
    broker = bench.throughput_socket(socket_overlay, 0.3, path="broker")
    # the data path is byte-identical; allow generous scheduler noise here
    ratio = sum(broker) / sum(native)
    assert 1 / 3 < ratio < 3, (native, broker)


def test_socket_fanin_aggregates(socket_overlay):
    values = bench.fanin_socket(socket_overlay, senders=2, duration=0.3)
    assert values and all(v > 0 for v in values)
