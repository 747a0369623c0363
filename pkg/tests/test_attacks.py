import asyncio
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from covertmesh.attacks import (AttackMetrics, DegenerateLabels, EmptyTrace, FlowTrace,
                                InsufficientTrials, TraceError, TraceTooShort, Vantage, Verdict,
                                WatermarkPattern, WindowConfig, apply_watermark,
                                calibrate_threshold, capture, compute_auc, detect_watermark,
                                extract_features, inject_watermark, merge, resistance_verdict,
                                train_correlator, watermark_score)
from covertmesh.attacks.features import SUMMARY_NAMES
from covertmesh.harness import vclock
from covertmesh.harness.emulator import Direction

from conftest import connected_pair, two_hosts

OUT, IN = Direction.OUT, Direction.IN


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


# AUC

def test_auc_matches_brute_force():
    rng = random.Random(0)
    for _ in range(100):
        n = rng.randint(2, 300)
        labels = [rng.randrange(2) for _ in range(n)]
        labels[0], labels[1] = 0, 1
        # coarse scores so ties are common
        scores = [rng.randint(0, 20) / 4 for _ in range(n)]
        assert abs(compute_auc(scores, labels) - brute_auc(scores, labels)) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e6, 1e6), st.booleans()), min_size=2, max_size=60)
       .filter(lambda xs: len({y for _, y in xs}) == 2))
def test_auc_brute_force_property(pairs):
    scores, labels = zip(*pairs)
    assert compute_auc(scores, labels) == pytest.approx(brute_auc(scores, labels), abs=1e-9)


def test_auc_edges():
    assert compute_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert compute_auc([0.5] * 6, [0, 1] * 3) == 0.5
    with pytest.raises(DegenerateLabels):
        compute_auc([1, 2], [1, 1])


def test_shuffled_labels_near_chance():
    rng = np.random.default_rng(1)
    scores = rng.normal(size=1000)
    labels = np.array([0, 1] * 500)
    informative = compute_auc(scores + labels, labels)
    rng.shuffle(labels)
    assert abs(compute_auc(scores + 0, labels) - 0.5) <= 0.05
    assert informative > 0.7


# traces and capture

def test_trace_invariants_and_csv(tmp_path):
    t = FlowTrace("f", Vantage.USER_SIDE, [(0, 100, OUT), (5, 60, IN), (5, 1500, OUT)])
    path = tmp_path / "f.csv"
    t.save(path)
    assert path.read_text().splitlines()[0] == "timestamp_us,size_bytes,direction"
    back = FlowTrace.load(path, Vantage.USER_SIDE)
    assert back.records == t.records
    assert t.only(IN).records == [(5, 60, IN)]
    with pytest.raises(TraceError):
        FlowTrace("f", records=[(5, 1, OUT), (4, 1, OUT)])
    with pytest.raises(TraceError):
        FlowTrace("f", records=[(5, 0, OUT)])
    with pytest.raises(TraceError):
        FlowTrace.from_csv("a,b\n1,2\n")


def test_merge_orders_by_time():
    a = FlowTrace("a", records=[(0, 1, OUT), (10, 1, OUT)])
    b = FlowTrace("b", records=[(5, 2, IN)])
    assert [r[0] for r in merge([a, b], "m", Vantage.PROXY_SIDE).records] == [0, 5, 10]


def _datagrams(n, taps=1, gap=0.02):
    async def main():
        net = two_hosts(10)
        tt = [net.tap("a", "b") for _ in range(taps)]
        got = []
        for i in range(n):
            net.send_datagram("a", "b", 100 + i, got.append)
            await asyncio.sleep(gap)
        await asyncio.sleep(1)
        return tt, got

    return vclock.run(main())


def test_capture_every_packet():
    (tap,), got = _datagrams(100)
    traces = capture(tap)
    (trace,) = traces.values()
    assert len(trace) == 100 == len(got)
    ts = [r[0] for r in trace.records]
    assert ts == sorted(ts)
    assert [r[1] for r in trace.records] == [100 + i for i in range(100)]


def test_two_taps_agree():
    (t1, t2), _ = _datagrams(50, taps=2)
    assert capture(t1)[next(iter(capture(t1)))].records == next(iter(capture(t2).values())).records


def test_capture_window():
    (tap,), _ = _datagrams(100)
    (trace,) = capture(tap, start=0.5, duration=0.5).values()
    assert all(500_000 <= r[0] < 1_000_000 for r in trace.records)
    assert len(trace) == 25


# features

def const_rate(n=200, gap_us=20_000, size=500):
    return FlowTrace("c", records=[(i * gap_us, size, OUT if i % 2 else IN) for i in range(n)])


def test_feature_length_fixed():
    cfg = WindowConfig()
    for n in (1, 5, 5000):
        assert extract_features(const_rate(n), cfg).shape == (cfg.length,)


def test_constant_rate_zero_iat_variance():
    f = extract_features(const_rate())
    s = dict(zip(SUMMARY_NAMES, f[-len(SUMMARY_NAMES):]))
    assert s["iat_var"] == 0 and s["iat_mean"] == 20 and s["size_var"] == 0
    assert s["bursts"] == 1


def test_single_packet():
    f = extract_features(FlowTrace("one", records=[(7, 99, OUT)]))
    s = dict(zip(SUMMARY_NAMES, f[-len(SUMMARY_NAMES):]))
    assert s["count"] == 1 and s["size_var"] == 0 and s["iat_var"] == 0
    assert f[60] == 99  # first out-window


def test_empty_trace():
    with pytest.raises(EmptyTrace):
        extract_features(FlowTrace("none"))


def test_time_scaling_shifts_windows():
    rng = random.Random(3)
    recs = sorted((rng.randrange(0, 15_000_000), rng.randint(40, 1500), rng.choice([IN, OUT]))
                  for _ in range(400))
    slow = [(2 * t, s, d) for t, s, d in recs]
    cfg = WindowConfig()

    def oracle(records):
        vol = np.zeros((2, cfg.n_windows))
        for t, s, d in records:
            w = int(t // (cfg.window_ms * 1000))
            if w < cfg.n_windows:
                vol[0 if d is IN else 1, w] += s
        return vol.ravel()

    for r in (recs, slow):
        got = extract_features(FlowTrace("x", records=r), cfg, origin_us=0)[:2 * cfg.n_windows]
        assert np.array_equal(got, oracle(r))


def test_features_deterministic():
    t = const_rate(300)
    assert np.array_equal(extract_features(t), extract_features(t))


# correlator

def synthetic_pairs(n_flows, seed, noise_ms=5.0):
    """Entry flows with random on/off volume, their delayed exits, and mismatched pairs."""
    rng = random.Random(seed)
    cfg = WindowConfig()
    entries, exits = [], []
    for _ in range(n_flows):
        recs, t = [], 0
        while t < 29_000_000:
            t += int(rng.expovariate(1 / 80_000))
            recs.append((t, rng.choice([100, 600, 1500]), rng.choice([IN, OUT])))
        shifted = sorted((t + 30_000 + int(rng.uniform(0, noise_ms) * 1000), s, d) for t, s, d in recs)
        entries.append(extract_features(FlowTrace("e", records=recs), cfg, 0))
        exits.append(extract_features(FlowTrace("x", records=shifted), cfg, 0))
    pairs = []
    for i in range(n_flows):
        pairs.append((entries[i], exits[i], 1))
        pairs.append((entries[i], exits[(i + 1 + rng.randrange(n_flows - 1)) % n_flows], 0))
    return pairs


@pytest.mark.parametrize("algorithm", ["gbt", "logistic"])
def test_direct_flows_separable(algorithm):
    c = train_correlator(synthetic_pairs(200, 0), seed=1, algorithm=algorithm)
    assert c.metrics.auc >= 0.9
    assert c.metrics.n_positive == 60 and c.metrics.n_negative == 60


def test_correlator_shuffled_labels_chance():
    pairs = synthetic_pairs(1000, 1)
    # one pair per entry flow, so no flow sits on both sides of the split
    pairs = pairs[0::4] + pairs[3::4]
    labels = [y for *_, y in pairs]
    random.Random(5).shuffle(labels)
    shuffled = [(e, x, y) for (e, x, _), y in zip(pairs, labels)]
    c = train_correlator(shuffled, seed=2, algorithm="logistic")
    assert abs(c.metrics.auc - 0.5) <= 0.05


def test_correlator_deterministic_and_validates():
    pairs = synthetic_pairs(60, 4)
    a, b = train_correlator(pairs, seed=3), train_correlator(pairs, seed=3)
    assert np.array_equal(a.test_scores, b.test_scores)
    assert 0 <= a.score(pairs[0][0], pairs[0][1]) <= 1
    with pytest.raises(DegenerateLabels):
        train_correlator([(e, x, 1) for e, x, _ in pairs])
    with pytest.raises(ValueError):
        train_correlator(pairs, algorithm="svm")


# watermark

def test_pattern_validation():
    with pytest.raises(ValueError):
        WatermarkPattern((0, 1), slot_ms=100, delay_ms=100)
    p = WatermarkPattern.random(7)
    assert p.non_degenerate and len(p.bits) == 16
    assert p == WatermarkPattern.random(7)
    assert p.period_ms == 6400


def test_all_zero_pattern_is_identity():
    t = const_rate(500)
    marked, applied = apply_watermark(t, WatermarkPattern((0,) * 16))
    assert marked.records == t.records and set(applied) == {0}


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 400))
def test_watermark_removal_restores(seed, n):
    rng = random.Random(seed)
    recs = sorted((rng.randrange(0, 20_000_000), rng.randint(1, 1500), rng.choice([IN, OUT]))
                  for _ in range(n))
    t = FlowTrace("r", records=recs)
    marked, applied = apply_watermark(t, WatermarkPattern.random(seed), epoch_us=rng.randrange(10**6))
    assert [(r[1], r[2]) for r in marked.records] == [(r[1], r[2]) for r in recs]
    ts = [r[0] for r in marked.records]
    assert ts == sorted(ts)
    assert [m[0] - a for m, a in zip(marked.records, applied)] == [r[0] for r in recs]


def test_self_score_maximal_among_shifts():
    t = const_rate(1600, gap_us=10_000)  # 16 s
    for bits in ((1, 0) * 8, WatermarkPattern.random(11).bits):
        pattern = WatermarkPattern(bits)
        marked, _ = apply_watermark(t, pattern)
        own = watermark_score(marked, pattern)
        shifts = [watermark_score(marked, WatermarkPattern(bits[k:] + bits[:k]), max_lag_ms=0)
                  for k in range(1, 16)]
        assert own >= max(shifts) - 1e-12
        assert own > 0.9


def test_unmarked_scores_low_and_threshold():
    rng = random.Random(2)
    pattern = WatermarkPattern.random(3)
    null = []
    for i in range(100):
        recs, t = [], 0
        while t < 16_000_000:
            t += int(rng.expovariate(1 / 15_000))
            recs.append((t, 500, OUT))
        null.append(watermark_score(FlowTrace(str(i), records=recs), pattern))
    theta = calibrate_threshold(null, 0.05)
    assert sum(s > theta for s in null) <= 5
    marked, _ = apply_watermark(const_rate(1600, 10_000), pattern)
    assert detect_watermark(marked, pattern, theta)[1]


def test_trace_too_short():
    with pytest.raises(TraceTooShort):
        watermark_score(const_rate(100, 10_000), WatermarkPattern.random(1))
    with pytest.raises(TraceTooShort):
        watermark_score(const_rate(2), WatermarkPattern.random(1))


def test_calibrate_threshold():
    assert calibrate_threshold(range(100), 0.05) == 95
    with pytest.raises(ValueError):
        calibrate_threshold([])


@pytest.mark.parametrize("bits", [(0,) * 16, (1, 0) * 8])
def test_inject_on_link_preserves_bytes(bits):
    data = random.Random(0).randbytes(100 * 500)

    async def main():
        net = two_hosts(10)
        cr, cw, sr, sw = await connected_pair(net)
        tap = net.tap("a", "b")
        if any(bits):
            inject_watermark(net, "a", "b", WatermarkPattern(bits, 100, 40))
        for i in range(100):
            cw.write(data[i * 500:(i + 1) * 500])
            await asyncio.sleep(0.01)
        cw.close()
        got = await sr.read()
        while len(got) < len(data):
            more = await sr.read()
            if not more:
                break
            got += more
        return got, [r.timestamp_us for r in tap.records if r.direction is OUT and r.size > 100]

    got, times = vclock.run(main())
    assert got == data
    assert times == sorted(times) and len(times) == 100
    gaps = set(np.diff(times))
    if any(bits):
        assert len(gaps) > 1
    else:
        assert gaps == {10_000}


# verdict

@pytest.mark.parametrize("acc,fpr,verdict", [
    (0.75, 0.25, Verdict.RESISTANT),
    (0.95, 0.02, Verdict.VULNERABLE),
    (0.80, 0.10, Verdict.RESISTANT),
    (0.81, 0.09, Verdict.VULNERABLE),
    (0.99, 0.10, Verdict.RESISTANT),
    (0.80, 0.00, Verdict.RESISTANT),
])
def test_resistance_verdict(acc, fpr, verdict):
    assert resistance_verdict(AttackMetrics(0.5, acc, fpr, 50, 50)) is verdict


def test_verdict_needs_trials():
    with pytest.raises(InsufficientTrials):
        resistance_verdict(AttackMetrics(0.5, 0.5, 0.5, 49, 50))


def test_metrics_json():
    m = AttackMetrics(0.6, 0.7, 0.1, 50, 60, {"config": "x"})
    assert AttackMetrics.from_json(m.to_json()) == m
    with pytest.raises(ValueError):
        AttackMetrics(1.2, 0.5, 0.5, 1, 1)
    with pytest.raises(ValueError):
        AttackMetrics(0.5, 0.5, 0.5, 0, 1)


def test_group_split_keeps_flows_apart():
    pairs = synthetic_pairs(120, 5)
    groups = [i // 2 for i in range(len(pairs))]
    c = train_correlator(pairs, seed=4, algorithm="logistic", groups=groups)
    # every pair is scored out of fold
    assert c.metrics.n_positive == c.metrics.n_negative == 120
    assert len(c.test_scores) == len(pairs)
    assert c.metrics.auc >= 0.9
