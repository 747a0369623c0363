"""The twelve acceptance criteria, one test each.

Every test is tagged ``@pytest.mark.criterion(n, title)``; the terminal summary
(see conftest.py) prints one PASS/FAIL line per criterion. Criteria 9 and 10
share one run of the default attack suite, which takes several minutes.
"""

import asyncio
import json
import random
import statistics
from pathlib import Path

import pytest

from covertmesh import cli
from covertmesh.attacks import Verdict, compute_auc
from covertmesh.channels import ChannelConfig, FrameSource
from covertmesh.channels.media import media_send_loop
from covertmesh.codec import (BLOCK_SIZES, HEADER_LEN, BlockQueue, DataBlock, Mode, Reassembler,
                              ReplaceEncoder, decode_frame, encode_add, encode_fragment, fragment,
                              reassemble)
from covertmesh.harness import vclock
from covertmesh.harness.attack_suite import AttackSpec, passive_config, run_attack_suite
from covertmesh.harness.experiments import (Cell, ExperimentSpec, run_latency, run_throughput,
                                            run_users)
from covertmesh.harness.topology import (HTTP_PORT, DeployMode, TopologySpec, UserSetup, body_for,
                                         build_network, deploy, fetch, user_host)
from covertmesh.multipath import GapTimeout, MultipathCircuit, PathSpec, join, split

GOLDEN = Path(__file__).parent / "golden" / "vectors.json"


@pytest.fixture
def detail(record_property):
    return lambda text: record_property("detail", text)


# 1

@pytest.mark.criterion(1, "codec round trip")
def test_codec_round_trip(detail):
    checked = 0
    for size in BLOCK_SIZES:
        rng = random.Random(size)
        blocks = [DataBlock(1, i, rng.randbytes(size)) for i in range(1000)]
        src = FrameSource(ChannelConfig(carrier="MEDIA", prng_seed=size))
        got = []
        for b in blocks:
            f = src.next()
            frags, cover = decode_frame(encode_add(f, b), Mode.ADD, (size,))
            assert cover == f
            got.append(reassemble(frags))
        assert got == blocks

        q = BlockQueue(capacity=len(blocks))
        for b in blocks:
            q.put(b)
        enc, r, got = ReplaceEncoder(q, seed=size), Reassembler(max_in_flight=4), []
        while len(got) < len(blocks):
            f = src.next()
            out = enc.encode(f)
            assert len(out) == len(f)
            for h, p in decode_frame(out, Mode.REPLACE)[0]:
                done = r.offer(h, p)
                if done:
                    got.append(done)
        assert got == blocks
        checked += 2 * len(blocks)
    detail(f"{checked} blocks bit-exact over ADD/REPLACE x {list(BLOCK_SIZES)}")


# 2

def _replace_shape(n_frames, n_blocks):
    cfg = ChannelConfig(carrier="MEDIA", mode="REPLACE", block_size=536, prng_seed=11)

    async def main():
        q = BlockQueue(capacity=max(1, n_blocks))
        for i in range(n_blocks):
            q.put(DataBlock(0, i, bytes([i & 0xFF]) * 536))
        out, stop = [], asyncio.Event()
        loop = asyncio.get_running_loop()

        def sink(kind, body):
            if kind != 2:  # audio is a separate fixed stream
                out.append((round(loop.time() * 1e6), len(body)))
                if len(out) == n_frames:
                    stop.set()

        await media_send_loop(q, cfg, sink, FrameSource(cfg), stop,
                              encoder=ReplaceEncoder(q, seed=3))
        return out, len(q)

    return vclock.run(main())


@pytest.mark.criterion(2, "REPLACE shape preservation")
def test_replace_shape(detail):
    n = 10_000
    idle, _ = _replace_shape(n, 0)
    busy, left = _replace_shape(n, 2 * n)
    assert left > 0, "channel was not saturated for the whole run"
    assert len(idle) == len(busy) == n
    diffs = sum(a != b for a, b in zip(idle, busy))
    detail(f"{n} frames, {diffs} differences in (time, length), {2 * n - left} blocks carried")
    assert diffs == 0


# 3

@pytest.mark.criterion(3, "fragmentation algebra")
def test_fragmentation_algebra(detail):
    rng = random.Random(3)
    caps = sorted(set(range(21, 64)) | set(rng.sample(range(64, 4097), 300)) | {4096})
    for size in BLOCK_SIZES:
        for cap in caps:
            b = DataBlock(rng.randrange(2**16), rng.randrange(2**32), rng.randbytes(size))
            frags = fragment(b, cap)
            assert len(frags) == -(-size // (cap - HEADER_LEN))
            assert all(len(encode_fragment(h, p)) <= cap for h, p in frags)
            rng.shuffle(frags)
            assert reassemble(frags) == b
    detail(f"{len(caps)} capacities in 21..4096 x {len(BLOCK_SIZES)} block sizes")


# 4

@pytest.mark.criterion(4, "multipath torture")
def test_multipath_torture(detail):
    delays = (5, 500, 50, 200)
    n, rv = 10_000, 99
    for k in (1, 2, 4):
        c = MultipathCircuit(1, [PathSpec(i, (10 + i, rv)) for i in range(k)])
        blocks = [DataBlock(1, i, b"") for i in range(n)]
        parts = split(blocks, c)
        counts = [len(parts[p]) for p in range(k)]
        assert all(n // k <= x <= -(-n // k) for x in counts)
        timed = [((b.block_seq * 50 + delays[p]) / 1000, b) for p, bs in parts.items() for b in bs]
        out, err = join(timed, c)
        assert err is None and [b.block_seq for b in out] == list(range(n))
        out, err = join([t for t in timed if t[1].block_seq != 17], c)
        assert [b.block_seq for b in out] == list(range(17))
        assert isinstance(err, GapTimeout) and err.seq == 17
    detail("K=1,2,4: 10^4 in order, drop of block 17 gives GapTimeout(17), counts balanced")


# 5

def _transfer(mode, k):
    async def main():
        topo = TopologySpec()
        net = build_network(topo, 1, seed=5)
        dep = await deploy(net, [UserSetup(user_host(0), ChannelConfig(), k)], mode, 5, topo)
        size = 250 * 1024
        res = await fetch(net.host(user_host(0)), dep.proxy_addr(0), ("server", HTTP_PORT),
                          f"/acc?size={size}")
        await dep.stop()
        return res.ok and res.body == body_for("/acc", size)

    return vclock.run(main())


@pytest.mark.criterion(5, "end-to-end modes and 50 users")
def test_end_to_end(detail):
    paths = {"gateway->bridge": _transfer(DeployMode.PT, 1),
             "gateway->proxy->bridge": _transfer(DeployMode.COMBINED, 1),
             "gateway->K=4->bridge": _transfer(DeployMode.COMBINED, 4)}
    users = run_users(ExperimentSpec(), 50)
    media = sum(u.carrier.startswith("MEDIA") for u in users)
    bad = sum(not (u.ok and u.sentinel_ok) for u in users)
    detail(f"{paths}; 50 users ({media} MEDIA), {bad} sentinel violations")
    assert all(paths.values())
    assert len(users) == 50 and media == 5 and bad == 0


# 6 and 7 share the default matrix on the default topology

@pytest.fixture(scope="module")
def bench_spec():
    return ExperimentSpec()


def _means(rows):
    by = {}
    for r in rows:
        by.setdefault(r.config, []).append(r.value)
    return {k: statistics.mean(v) for k, v in by.items()}


@pytest.mark.criterion(6, "throughput trends")
def test_throughput_trends(bench_spec, detail):
    kbps = _means(run_throughput(bench_spec))
    add = [kbps[Cell("MEDIA", "ADD", s).name] for s in BLOCK_SIZES]
    rep = [kbps[Cell("MEDIA", "REPLACE", s).name] for s in BLOCK_SIZES]
    detail(f"ADD {[round(x) for x in add]} REPLACE {[round(x) for x in rep]} Kbps")
    assert all(a < b for a, b in zip(add, add[1:]))
    assert all(a < b for a, b in zip(rep, rep[1:]))
    assert all(a >= r for a, r in zip(add, rep))
    assert 60 <= rep[0] <= 300
    assert 400 <= add[-1] <= 1100


@pytest.mark.criterion(7, "latency trends")
def test_latency_trends(bench_spec, detail):
    ttfb = _means(run_latency(bench_spec))
    media = {m: [ttfb[Cell("MEDIA", m, s).name] for s in BLOCK_SIZES] for m in ("ADD", "REPLACE")}
    spread = {m: (max(v) - min(v)) / min(v) for m, v in media.items()}
    detail(f"TUNNEL {ttfb['TUNNEL']:.0f} ms, MEDIA min {min(min(v) for v in media.values()):.0f} ms, "
           f"spread {({m: round(s, 3) for m, s in spread.items()})}")
    assert all(t > ttfb["TUNNEL"] for v in media.values() for t in v)
    assert all(s < 0.15 for s in spread.values())


# 8

@pytest.mark.criterion(8, "AUC oracle")
def test_auc_oracle(detail):
    rng = random.Random(8)
    worst = 0.0
    for _ in range(100):
        n = rng.randint(2, 300)
        scores = [rng.randint(0, 20) / 4 for _ in range(n)]  # plenty of ties
        labels = [rng.randint(0, 1) for _ in range(n)]
        labels[0], labels[1] = 0, 1
        pos = [s for s, y in zip(scores, labels) if y]
        neg = [s for s, y in zip(scores, labels) if not y]
        brute = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg) / (len(pos) * len(neg))
        worst = max(worst, abs(compute_auc(scores, labels) - brute))
    scores = [rng.random() for _ in range(1000)]
    labels = [i % 2 for i in range(1000)]
    rng.shuffle(labels)
    shuffled = compute_auc(scores, labels)
    detail(f"max |error| {worst:.1e}, shuffled-label AUC {shuffled:.3f}")
    assert worst <= 1e-9
    assert abs(shuffled - 0.5) <= 0.05


# 9 and 10 share one default attack-suite run

@pytest.fixture(scope="module")
def attack_report():
    return run_attack_suite(AttackSpec())


@pytest.mark.criterion(9, "passive attack")
def test_passive_attack(attack_report, detail):
    spec = AttackSpec()
    k1 = attack_report.get("passive", passive_config(spec, 1)).metrics.auc
    k4 = attack_report.get("passive", passive_config(spec, 4)).metrics.auc
    detail(f"AUC K=1 {k1:.3f}, K=4 {k4:.3f}")
    assert k1 - k4 >= 0.05
    assert k4 <= 0.65


@pytest.mark.criterion(10, "active attack")
def test_active_attack(attack_report, detail):
    cal = attack_report.get("calibration", "DIRECT").metrics
    acc = {}
    verdicts = {}
    for mode in (Mode.ADD, Mode.REPLACE):
        for s in BLOCK_SIZES:
            name = Cell("MEDIA", mode, s).name
            r = attack_report.get("active", name)
            assert r.metrics.n_positive >= 50 and r.metrics.n_negative >= 50
            acc[mode, s] = r.metrics.accuracy
            verdicts[mode, s] = r.verdict
    detail(f"calibration acc {cal.accuracy:.3f} fpr {cal.fpr:.3f}; "
           + ", ".join(f"{m.value}/{s} {a:.2f} {verdicts[m, s].value}" for (m, s), a in acc.items()))
    assert cal.accuracy >= 0.9 and cal.fpr <= 0.05
    for mode in (Mode.ADD, Mode.REPLACE):
        seq = [acc[mode, s] for s in BLOCK_SIZES]
        assert all(a <= b for a, b in zip(seq, seq[1:]))
    assert all(acc[Mode.REPLACE, s] <= acc[Mode.ADD, s] for s in BLOCK_SIZES)
    assert all(verdicts[m, s] is Verdict.RESISTANT for m in Mode for s in (536, 1050))


# 11

BENCH_YAML = """\
seed: 7
matrix: [TUNNEL, MEDIA-REPLACE-536, MEDIA-ADD-4134]
users: [3]
file_size: 65536
repetitions: {latency: 2, throughput: 1, repeats: 1}
"""

ATTACK_YAML = """\
seed: 7
passive: {k: [1, 2], flows: 12, users_per_run: 2, duration: 12.0}
active: {cells: [MEDIA-ADD-536], trials: 50, calibration_flows: 50, send_seconds: 8.0, horizon: 9.0}
"""


@pytest.mark.criterion(11, "determinism")
def test_determinism(tmp_path, detail):
    (tmp_path / "bench.yaml").write_text(BENCH_YAML)
    (tmp_path / "attack.yaml").write_text(ATTACK_YAML)
    same = {}
    for cmd in ("bench", "attack"):
        outs = []
        for run in range(2):
            out = tmp_path / f"{cmd}{run}"
            assert cli.main([cmd, "--spec", str(tmp_path / f"{cmd}.yaml"), "--out", str(out)]) == 0
            (csv,) = out.glob("*.csv")
            outs.append(csv.read_bytes())
        same[cmd] = outs[0] == outs[1] and len(outs[0].splitlines()) > 1
    detail(f"byte-identical CSVs: {same}")
    assert all(same.values())


# 12

@pytest.mark.criterion(12, "wire-format goldens")
def test_goldens(detail):
    from test_golden import VECTORS, test_fragment_wire, test_records_wire, test_signaling_wire
    for v in VECTORS["fragments"]:
        test_fragment_wire(v)
    for v in VECTORS["signaling"]:
        test_signaling_wire(v)
    test_records_wire()
    assert json.loads(GOLDEN.read_text()) == VECTORS
    detail(f"{len(VECTORS['fragments'])} fragment, {len(VECTORS['signaling'])} signaling, "
           f"{len(VECTORS['records'])} record vectors")
