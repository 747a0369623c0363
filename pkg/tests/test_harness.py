import asyncio
import json

import pytest

from covertmesh.harness import vclock
from covertmesh.harness.attack_suite import (AttackReport, AttackResult, AttackSpec,
                                             session_schedule, trial_pattern)
from covertmesh.harness.emulator import (MSS, WIRE_OVERHEAD, DelayTap, EmulatorError, LinkSpec,
                                         VirtualNetwork)
from covertmesh.harness.experiments import (Cell, ExperimentError, ExperimentSpec, Row,
                                            emit_report, rows_to_csv, run_latency, summarize)
from covertmesh.attacks import AttackMetrics, FlowTrace, Verdict

from conftest import connected_pair, two_hosts


def send_datagrams(link, n, gap, size=100, seed=0, settle=10):
    """Offer ``n`` datagrams a->b every ``gap`` s; returns (send times, arrival times, net)."""
    async def main():
        net = VirtualNetwork(seed)
        net.add_link(link)
        loop = asyncio.get_running_loop()
        sent, got = [], []
        for _ in range(n):
            sent.append(loop.time())
            net.send_datagram("a", "b", size, lambda p: got.append(loop.time()))
            if gap:
                await asyncio.sleep(gap)
        await asyncio.sleep(settle)
        return sent, got, net

    return vclock.run(main())


def test_fixed_delay():
    sent, got, _ = send_datagrams(LinkSpec("a", "b", 50), 1000, 0.001)
    assert len(got) == 1000
    assert all(g - s == pytest.approx(0.05, abs=1e-9) for s, g in zip(sent, got))


def test_token_bucket_rate():
    # offer 10 Mbps of 1250-byte packets to a 2 Mbps link for 5 s
    n = 5000
    _, got, _ = send_datagrams(LinkSpec("a", "b", 0, bandwidth_kbps=2000), n, 0.001, size=1250,
                               settle=30)
    assert len(got) == n
    span = got[-1] - got[0]
    rate_kbps = (n - 1) * 1250 * 8 / span / 1000
    assert rate_kbps == pytest.approx(2000, rel=0.01)


def test_loss_binomial_and_conservation():
    _, got, net = send_datagrams(LinkSpec("a", "b", 1, loss_rate=0.01), 100_000, 0)
    c = net.link("a", "b").counters()["OUT"]
    drops = 100_000 - len(got)
    assert abs(drops - 1000) <= 120
    assert c["in"] == c["out"] + c["dropped"] and c["dropped"] == drops


def test_jitter_seeded_and_fifo():
    link = dict(one_way_delay_ms=20, jitter_ms=10)
    a = send_datagrams(LinkSpec("a", "b", **link), 200, 0.001, seed=3)[1]
    b = send_datagrams(LinkSpec("a", "b", **link), 200, 0.001, seed=3)[1]
    c = send_datagrams(LinkSpec("a", "b", **link), 200, 0.001, seed=4)[1]
    assert a == b != c
    assert a == sorted(a)


def test_link_validation():
    for bad in (LinkSpec("a", "a"), LinkSpec("a", "b", -1), LinkSpec("a", "b", bandwidth_kbps=0),
                LinkSpec("a", "b", loss_rate=1.0)):
        with pytest.raises(EmulatorError):
            VirtualNetwork().add_link(bad)
    net = two_hosts()
    with pytest.raises(EmulatorError):
        net.add_link(LinkSpec("b", "a"))
    net.add_host("island")
    with pytest.raises(EmulatorError):
        net.route("a", "island")


def test_routing_shortest_path():
    net = VirtualNetwork()
    for a, b, d in (("x", "y", 10), ("y", "z", 10), ("x", "z", 100)):
        net.add_link(LinkSpec(a, b, d))
    assert net.path_delay("x", "z") == pytest.approx(0.1)
    assert net.path_delay("x", "y") == pytest.approx(0.01)


def test_stream_segments_and_refusal():
    async def main():
        net = two_hosts(25)
        tap = net.tap("a", "b")
        cr, cw, sr, sw = await connected_pair(net)
        cw.write(bytes(3 * MSS + 10))
        assert len(await sr.readexactly(3 * MSS + 10)) == 3 * MSS + 10
        sizes = [r.size for r in tap.records if r.size > WIRE_OVERHEAD]
        assert sizes == [MSS + WIRE_OVERHEAD] * 3 + [10 + WIRE_OVERHEAD]
        assert cw.get_extra_info("peername") == ("b", 5000)
        cw.close()
        assert await sr.read() == b""
        with pytest.raises(ConnectionRefusedError):
            await net.host("a").open_connection("b", 6000)

    vclock.run(main())


def test_delay_tap_preserves_order():
    async def main():
        net = two_hosts(5)
        loop = asyncio.get_running_loop()
        # delay every other packet offer by 30 ms
        net.tap("a", "b", DelayTap(lambda t: 0.03 if round(t * 1000) % 20 == 0 else 0.0))
        got = []
        for i in range(50):
            net.send_datagram("a", "b", 100 + i, lambda p: got.append((loop.time(), p.size)))
            await asyncio.sleep(0.01)
        await asyncio.sleep(1)
        return got

    got = vclock.run(main())
    assert [s for _, s in got] == [100 + i for i in range(50)]
    assert [t for t, _ in got] == sorted(t for t, _ in got)


def test_deadlock_detected():
    async def main():
        await asyncio.get_running_loop().create_future()

    with pytest.raises(vclock.Deadlock):
        vclock.run(main())


def test_virtual_time_is_fast():
    async def main():
        await asyncio.sleep(3600)
        return asyncio.get_running_loop().time()

    assert vclock.run(main()) == 3600


# experiments

def rows():
    return [Row("throughput", "TUNNEL", 1, r, i, "kbps", float(10 * r + i))
            for r in range(2) for i in range(5)] + [Row("latency", "BARE", 1, 0, 0, "ttfb_ms", 300.0)]


def test_emit_report_stable(tmp_path):
    a, _ = emit_report(rows(), tmp_path / "a", {"seed": 1})
    b, _ = emit_report(rows(), tmp_path / "b", {"seed": 1})
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().splitlines()[0] == "experiment,config,users,repeat,run,metric,value"


def test_emit_report_empty(tmp_path):
    with pytest.raises(ExperimentError):
        emit_report([], tmp_path / "none")
    assert not (tmp_path / "none").exists()


def test_summary_recomputes(tmp_path):
    _, js = emit_report(rows(), tmp_path)
    groups = {(g["experiment"], g["config"]): g for g in json.loads(js.read_text())["groups"]}
    tp = [float(10 * r + i) for r in range(2) for i in range(5)]
    assert groups[("throughput", "TUNNEL")]["mean"] == pytest.approx(sum(tp) / len(tp))
    assert groups[("throughput", "TUNNEL")]["n"] == 10
    assert summarize(rows()) == summarize(list(rows()))


def test_csv_value_format():
    assert rows_to_csv([Row("x", "y", 1, 0, 0, "m", 1 / 3)]).splitlines()[1].endswith(",0.333333")


def test_spec_parsing():
    spec = ExperimentSpec.from_dict({
        "seed": 4, "matrix": ["TUNNEL", "MEDIA-ADD-536", {"carrier": "MEDIA", "mode": "REPLACE",
                                                         "block_size": 2078}],
        "repetitions": {"latency": 3, "throughput": 2, "repeats": 1},
        "topology": {"user_proxy_ms": 5}})
    assert [c.name for c in spec.matrix] == ["TUNNEL", "MEDIA-ADD-536", "MEDIA-REPLACE-2078"]
    assert (spec.latency_reps, spec.throughput_runs, spec.repeats) == (3, 2, 1)
    assert spec.topology.user_proxy_ms == 5
    d = ExperimentSpec()
    assert (d.latency_reps, d.throughput_runs, d.repeats) == (10, 5, 2)
    with pytest.raises(ExperimentError):
        ExperimentSpec.from_dict({"users": [51]})
    with pytest.raises(ExperimentError):
        ExperimentSpec.from_dict({"nonsense": 1})
    with pytest.raises(ExperimentError):
        Cell("MEDIA", "ADD", 1000)


def test_bare_ttfb_is_analytic():
    spec = ExperimentSpec(matrix=[], latency_reps=2, repeats=1)
    out = run_latency(spec)
    t = spec.topology
    one_way = t.user_proxy_ms + t.proxy_bridge_ms + t.bridge_server_ms
    # connection handshake plus request/response, four one-way trips
    assert [r.value for r in out] == pytest.approx([4 * one_way] * 2, abs=1)


# attack suite plumbing

def test_attack_spec_parsing(tmp_path):
    p = tmp_path / "attack.yaml"
    p.write_text("seed: 3\npassive: {k: [1], flows: 8, cell: MEDIA-REPLACE-536}\n"
                 "active: {cells: [MEDIA-ADD-536], trials: 50, rate_kbps: [100, 200]}\n")
    spec = AttackSpec.load(p)
    assert spec.seed == 3 and spec.passive.k == [1]
    assert spec.passive.cell.name == "MEDIA-REPLACE-536"
    assert [c.name for c in spec.active.cells] == ["MEDIA-ADD-536"]
    assert spec.active.rate_kbps == (100, 200)
    with pytest.raises(ExperimentError):
        AttackSpec.from_dict({"active": {"bogus": 1}})


def test_trial_inputs_deterministic():
    spec = AttackSpec()
    assert trial_pattern(spec, 5) == trial_pattern(spec, 5) != trial_pattern(spec, 6)
    import random
    a = session_schedule(random.Random(1), spec.passive)
    assert a == session_schedule(random.Random(1), spec.passive)
    assert all(2000 <= n <= 20000 for _, n in a)
    assert all(t < spec.passive.duration for t, _ in a)


def test_attack_report_rows_and_traces(tmp_path):
    m = AttackMetrics(0.6, 0.7, 0.2, 50, 50)
    report = AttackReport([AttackResult("active", "MEDIA-ADD-536", m, Verdict.RESISTANT, 0.4)],
                          {"MEDIA-ADD-536": [FlowTrace("f1", "EXIT_SIDE", [(0, 10, "OUT")])]})
    rows_ = report.rows(1)
    assert [r.metric for r in rows_] == ["auc", "accuracy", "fpr", "resistant"]
    assert rows_[-1].value == 1.0
    assert report.summary()["attacks"][0]["verdict"] == "RESISTANT"
    (path,) = report.save_traces(tmp_path)
    assert path == tmp_path / "traces" / "MEDIA-ADD-536" / "exit_side-f1.csv"
    with pytest.raises(KeyError):
        report.get("passive", "K=1")
