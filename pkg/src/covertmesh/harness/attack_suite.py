"""Passive correlation and active watermarking experiments on the emulated deployment.

Passive: every user keeps one request/response session open to the server
while the adversary records the user's link to one proxy (entry) and the
bridge-to-server link (exit), then trains a correlator on matched and
unmatched entry/exit pairs.

Active: an application host behind the gateway uploads at a fixed rate; the
adversary delays its packets on the access link according to a watermark
pattern and looks for the pattern on the bridge-to-server link.
"""

from __future__ import annotations

import asyncio
import math
import random
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from ..attacks import (AttackMetrics, FlowTrace, TraceTooShort, Vantage, Verdict, WatermarkPattern,
                       calibrate_threshold, capture, compute_auc, extract_features,
                       inject_watermark, merge, resistance_verdict, train_correlator, watermark_score)
from ..attacks.features import WindowConfig
from ..channels import Carrier
from ..codec import BLOCK_SIZES, Mode
from ..nodes import client_connect
from ..nodes.socks import Reply
from . import vclock
from .emulator import Direction
from .experiments import Cell, ExperimentError, Row
from .topology import (HTTP_PORT, DeployMode, TopologySpec, UserSetup, build_network, client_host,
                       deploy, fetch, proxy_host, user_host)

SESSION_PORT = 82
SINK_PORT = 81
REQUEST_LEN = 200


@dataclass
class PassiveSpec:
    cell: Cell = Cell(Carrier.MEDIA, Mode.ADD, 1050)
    k: list[int] = field(default_factory=lambda: [1, 4])
    flows: int = 100
    users_per_run: int = 4
    duration: float = 30.0
    think_mean: float = 3.0
    response_bytes: tuple[int, int] = (2000, 20000)
    unmatched_per_flow: int = 2
    algorithm: str = "gbt"


@dataclass
class ActiveSpec:
    cells: list[Cell] = field(default_factory=lambda: [
        Cell(Carrier.MEDIA, m, s) for m in (Mode.ADD, Mode.REPLACE) for s in BLOCK_SIZES])
    trials: int = 50  # per class
    calibration_flows: int = 200  # per class
    rate_kbps: tuple[float, float] = (100.0, 1000.0)
    send_seconds: float = 15.0
    horizon: float = 16.0
    chunk: int = 1000
    n_bits: int = 16
    slot_ms: float = 400.0
    delay_ms: float = 150.0
    target_fpr: float = 0.05


@dataclass
class AttackSpec:
    seed: int = 1
    topology: TopologySpec = field(default_factory=TopologySpec)
    mode: DeployMode = DeployMode.COMBINED
    passive: PassiveSpec = field(default_factory=PassiveSpec)
    active: ActiveSpec = field(default_factory=ActiveSpec)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        d = dict(d)
        try:
            if "topology" in d:
                d["topology"] = TopologySpec.from_dict(d["topology"] or {})
            if "passive" in d:
                p = dict(d["passive"] or {})
                if "cell" in p:
                    p["cell"] = Cell.parse(p["cell"])
                if "response_bytes" in p:
                    p["response_bytes"] = tuple(p["response_bytes"])
                d["passive"] = PassiveSpec(**p)
            if "active" in d:
                a = dict(d["active"] or {})
                if "cells" in a:
                    a["cells"] = [Cell.parse(c) for c in a["cells"]]
                if "rate_kbps" in a:
                    a["rate_kbps"] = tuple(a["rate_kbps"])
                d["active"] = ActiveSpec(**a)
            return cls(**d)
        except TypeError as e:
            raise ExperimentError(f"bad attack spec: {e}") from None

    @classmethod
    def load(cls, path: str | Path) -> "AttackSpec":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})


@dataclass
class AttackResult:
    experiment: str  # passive | active | calibration
    config: str
    metrics: AttackMetrics
    verdict: Optional[Verdict] = None
    theta: Optional[float] = None

    def rows(self, seed: int) -> list[Row]:
        m = self.metrics
        out = [Row(self.experiment, self.config, 1, 0, seed, name, round(float(getattr(m, name)), 6))
               for name in ("auc", "accuracy", "fpr")]
        if self.verdict is not None:
            out.append(Row(self.experiment, self.config, 1, 0, seed, "resistant",
                           float(self.verdict is Verdict.RESISTANT)))
        return out

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "config": self.config,
                "auc": round(self.metrics.auc, 6), "accuracy": round(self.metrics.accuracy, 6),
                "fpr": round(self.metrics.fpr, 6), "n_positive": self.metrics.n_positive,
                "n_negative": self.metrics.n_negative,
                "verdict": None if self.verdict is None else self.verdict.value,
                "theta": None if self.theta is None else round(self.theta, 6)}


@dataclass
class AttackReport:
    results: list[AttackResult]
    traces: dict[str, list[FlowTrace]] = field(default_factory=dict)

    def get(self, experiment: str, config: str) -> AttackResult:
        for r in self.results:
            if r.experiment == experiment and r.config == config:
                return r
        raise KeyError((experiment, config))

    def rows(self, seed: int) -> list[Row]:
        return [row for r in self.results for row in r.rows(seed)]

    def summary(self) -> dict:
        return {"attacks": [r.to_dict() for r in self.results]}

    def save_traces(self, out: str | Path) -> list[Path]:
        paths = []
        for config, traces in self.traces.items():
            d = Path(out) / "traces" / config
            d.mkdir(parents=True, exist_ok=True)
            for t in traces:
                p = d / f"{t.vantage.value.lower()}-{t.flow_id}.csv"
                t.save(p)
                paths.append(p)
        return paths


# passive ----------------------------------------------------------------------

def session_schedule(rng: random.Random, spec: PassiveSpec) -> list[tuple[float, int]]:
    """(offset seconds, response bytes) for one user's session."""
    lo, hi = spec.response_bytes
    t, out = rng.uniform(0.0, 1.0), []
    while t < spec.duration - 1.0:
        out.append((t, round(math.exp(rng.uniform(math.log(lo), math.log(hi))))))
        t += rng.expovariate(1.0 / spec.think_mean)
    return out


async def _passive_run(spec: AttackSpec, k: int, run: int, n: int
                       ) -> tuple[list[FlowTrace], list[FlowTrace], int]:
    ps = spec.passive
    seed = spec.seed * 1000 + run
    net = build_network(spec.topology, n, seed)
    peers: dict[int, tuple] = {}

    async def session(reader, writer):
        try:
            (user,) = struct.unpack(">I", await reader.readexactly(4))
            peers[user] = writer.get_extra_info("peername")
            rng = random.Random(seed * 31 + user)
            while True:
                req = await reader.readexactly(REQUEST_LEN)
                writer.write(rng.randbytes(struct.unpack(">I", req[:4])[0]))
                await writer.drain()
        except (asyncio.IncompleteReadError, ConnectionError):
            pass
        writer.close()

    await net.host("server").start_server(session, SESSION_PORT)
    users = [UserSetup(user_host(i), ps.cell.channel(seed * 100 + i), k) for i in range(n)]
    dep = await deploy(net, users, spec.mode, seed, spec.topology)
    observed = proxy_host(0)
    entry_taps = [net.tap(user_host(i), observed) for i in range(n)]
    exit_tap = net.tap("bridge", "server")
    loop = asyncio.get_running_loop()

    conns = []
    for i in range(n):
        host = net.host(user_host(i))
        warm = await fetch(host, dep.proxy_addr(i), ("server", HTTP_PORT), "/warm?size=16")
        if not warm.ok:
            raise ExperimentError(f"passive run {run}: user {i} warm-up failed ({warm.reply})")
        reader, writer = await host.open_connection(*dep.proxy_addr(i))
        rep = await client_connect(reader, writer, "server", SESSION_PORT)
        if rep is not Reply.SUCCEEDED:
            raise ExperimentError(f"passive run {run}: user {i} got {rep.name}")
        writer.write(struct.pack(">I", i))
        conns.append((reader, writer))

    t0 = loop.time() + 0.5

    async def user(i: int) -> None:
        reader, writer = conns[i]
        for offset, size in session_schedule(random.Random(seed * 7919 + i), ps):
            await asyncio.sleep(max(0.0, t0 + offset - loop.time()))
            writer.write(struct.pack(">I", size).ljust(REQUEST_LEN, b"\0"))
            await reader.readexactly(size)

    await asyncio.gather(*(user(i) for i in range(n)))
    await asyncio.sleep(max(0.0, t0 + ps.duration + 1.0 - loop.time()))

    entries, exits = [], []
    for i in range(n):
        e = capture(entry_taps[i], Vantage.PROXY_SIDE, start=t0, duration=ps.duration)
        entries.append(merge(e.values(), f"r{run}u{i}", Vantage.PROXY_SIDE))
        host, port = peers[i]
        x = capture(exit_tap, Vantage.EXIT_SIDE, select=lambda f: f[1] == host and f[2] == port,
                    start=t0, duration=ps.duration)
        exits.append(merge(x.values(), f"r{run}u{i}", Vantage.EXIT_SIDE))
    await dep.stop()
    return entries, exits, round(t0 * 1e6)


def passive_config(spec: AttackSpec, k: int) -> str:
    return f"K={k} {spec.passive.cell.name}"


def run_passive(spec: AttackSpec, k: int) -> tuple[AttackResult, list[FlowTrace]]:
    """Correlate entry flows seen at one proxy with exit flows, for ``k`` paths per user."""
    ps = spec.passive
    wcfg = WindowConfig(n_windows=max(1, int(ps.duration * 1000 // WindowConfig.window_ms)))
    entries, exits = [], []
    sample: list[FlowTrace] = []
    run = 0
    while len(entries) < ps.flows:
        n = min(ps.users_per_run, ps.flows - len(entries))
        e, x, origin = vclock.run(_passive_run(spec, k, run, n))
        if not sample:
            sample = e + x
        entries += [extract_features(t, wcfg, origin) for t in e]
        exits += [extract_features(t, wcfg, origin) for t in x]
        run += 1
    rng = random.Random(spec.seed)
    pairs, groups = [], []
    for i in range(len(entries)):
        pairs.append((entries[i], exits[i], 1))
        others = [j for j in range(len(exits)) if j != i]
        for j in rng.sample(others, min(ps.unmatched_per_flow, len(others))):
            pairs.append((entries[i], exits[j], 0))
        groups += [i] * (len(pairs) - len(groups))
    config = passive_config(spec, k)
    corr = train_correlator(pairs, spec.seed, ps.algorithm, config={"name": config, "k": k},
                            groups=groups)
    return AttackResult("passive", config, corr.metrics), sample


# active -----------------------------------------------------------------------

def _trial_rate(spec: AttackSpec, trial: int) -> float:
    # common random numbers: trial i offers the same rate in every configuration
    lo, hi = spec.active.rate_kbps
    return math.exp(random.Random(spec.seed * 100_003 + trial).uniform(math.log(lo), math.log(hi)))


def trial_pattern(spec: AttackSpec, trial: int) -> WatermarkPattern:
    a = spec.active
    return WatermarkPattern.random(spec.seed * 100_019 + trial, a.n_bits, a.slot_ms, a.delay_ms)


async def _sink(reader, writer):
    try:
        while await reader.read(65536):
            pass
    except ConnectionError:
        pass
    writer.close()


async def _active_trial(spec: AttackSpec, cell: Optional[Cell], trial: int,
                        marked: bool) -> tuple[FlowTrace, int]:
    a = spec.active
    seed = spec.seed * 10_000 + trial
    net = build_network(spec.topology, 1, seed, clients=True)
    await net.host("server").start_server(_sink, SINK_PORT)
    app = net.host(client_host(0))
    if cell is None:
        reader, writer = await app.open_connection("server", SINK_PORT)
        dep = None
    else:
        dep = await deploy(net, [UserSetup(user_host(0), cell.channel(seed))], spec.mode, seed,
                           spec.topology)
        warm = await fetch(app, dep.proxy_addr(0), ("server", HTTP_PORT), "/warm?size=16")
        if not warm.ok:
            raise ExperimentError(f"active trial {trial}: warm-up failed ({warm.reply})")
        reader, writer = await app.open_connection(*dep.proxy_addr(0))
        rep = await client_connect(reader, writer, "server", SINK_PORT)
        if rep is not Reply.SUCCEEDED:
            raise ExperimentError(f"active trial {trial}: got {rep.name}")
    exit_tap = net.tap("bridge", "server")
    loop = asyncio.get_running_loop()
    epoch = loop.time()
    if marked:
        inject_watermark(net, client_host(0), user_host(0), trial_pattern(spec, trial),
                         match=lambda p, d: d is Direction.OUT, epoch=epoch)
    rng = random.Random(seed)
    gap = a.chunk * 8 / (_trial_rate(spec, trial) * 1000)
    t = epoch
    while t < epoch + a.send_seconds:
        writer.write(rng.randbytes(a.chunk))
        t += gap
        await asyncio.sleep(max(0.0, t - loop.time()))
    await asyncio.sleep(max(0.0, epoch + a.horizon - loop.time()))
    flows = capture(exit_tap, Vantage.EXIT_SIDE, select=lambda f: f[4] == SINK_PORT)
    trace = merge(flows.values(), f"t{trial}{'w' if marked else 'n'}", Vantage.EXIT_SIDE)
    if dep is not None:
        await dep.stop()
    return trace, round(epoch * 1e6)


def active_score(spec: AttackSpec, cell: Optional[Cell], trial: int, marked: bool
                 ) -> tuple[float, FlowTrace]:
    trace, epoch_us = vclock.run(_active_trial(spec, cell, trial, marked))
    try:
        score = watermark_score(trace, trial_pattern(spec, trial), epoch_us,
                                direction=Direction.OUT)
    except TraceTooShort:
        score = -1.0  # nothing got through: no evidence of the mark
    return score, trace


def _detector_metrics(pos: list[float], neg: list[float], theta: float, config: dict) -> AttackMetrics:
    p, n = np.asarray(pos), np.asarray(neg)
    tp, fp = int(np.sum(p > theta)), int(np.sum(n > theta))
    return AttackMetrics(auc=compute_auc(list(p) + list(n), [1] * len(p) + [0] * len(n)),
                         accuracy=(tp + len(n) - fp) / (len(p) + len(n)),
                         fpr=fp / len(n), n_positive=len(p), n_negative=len(n), config=config)


def calibrate(spec: AttackSpec) -> AttackResult:
    """Fit the threshold on clean, unprotected flows and measure the detector there.

    The threshold sits at the target FPR of the clean scores; accuracy also
    counts as many watermarked unprotected flows.
    """
    a = spec.active
    base = 1_000_000  # calibration trials never share seeds with evaluation trials
    null = [active_score(spec, None, base + i, False)[0] for i in range(a.calibration_flows)]
    theta = calibrate_threshold(null, a.target_fpr)
    marked = [active_score(spec, None, base + a.calibration_flows + i, True)[0]
              for i in range(a.calibration_flows)]
    m = _detector_metrics(marked, null, theta, {"name": "DIRECT"})
    return AttackResult("calibration", "DIRECT", m, resistance_verdict(m), theta)


def run_active(spec: AttackSpec, cell: Optional[Cell], theta: float
               ) -> tuple[AttackResult, list[FlowTrace]]:
    """``trials`` watermarked and ``trials`` clean flows through ``cell`` (None: unprotected)."""
    a = spec.active
    pos, neg, sample = [], [], []
    for i in range(a.trials):
        s, tr = active_score(spec, cell, i, True)
        pos.append(s)
        s, tn = active_score(spec, cell, a.trials + i, False)
        neg.append(s)
        if i == 0:
            sample = [tr, tn]
    name = "DIRECT" if cell is None else cell.name
    m = _detector_metrics(pos, neg, theta, {"name": name})
    return AttackResult("active", name, m, resistance_verdict(m), theta), sample


def run_attack_suite(spec: AttackSpec) -> AttackReport:
    """Passive matrix over K, then detector calibration and the active carrier matrix."""
    report = AttackReport([])
    for k in spec.passive.k:
        res, sample = run_passive(spec, k)
        report.results.append(res)
        report.traces[f"passive-K{k}"] = sample
    cal = calibrate(spec)
    report.results.append(cal)
    theta = cal.theta
    # held-out clean and marked flows without protection, for reference
    res, sample = run_active(spec, None, theta)
    report.results.append(res)
    report.traces["active-DIRECT"] = sample
    for cell in spec.active.cells:
        res, sample = run_active(spec, cell, theta)
        report.results.append(res)
        report.traces[f"active-{cell.name}"] = sample
    return report
