"""Throughput, latency and multi-user experiments on the emulated deployment."""

from __future__ import annotations

import asyncio
import csv
import io
import json
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from ..channels import Carrier, ChannelConfig
from ..codec import BLOCK_SIZES, Mode
from . import vclock
from .topology import (HTTP_PORT, DeployMode, TopologySpec, UserSetup, build_network, deploy,
                       fetch, user_host)


class ExperimentError(RuntimeError):
    pass


class TransferTimeout(ExperimentError):
    pass


class RequestTimeout(ExperimentError):
    pass


class TransferCorrupted(ExperimentError):
    pass


@dataclass(frozen=True)
class Cell:
    """One carrier configuration of the experiment matrix."""
    carrier: Carrier = Carrier.TUNNEL
    mode: Mode = Mode.REPLACE
    block_size: int = 536

    def __post_init__(self):
        object.__setattr__(self, "carrier", Carrier(self.carrier))
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.block_size not in BLOCK_SIZES:
            raise ExperimentError(f"block size {self.block_size} not in {BLOCK_SIZES}")

    @property
    def name(self) -> str:
        if self.carrier is Carrier.TUNNEL:
            return "TUNNEL"
        return f"MEDIA-{self.mode.value}-{self.block_size}"

    def channel(self, seed: int = 0) -> ChannelConfig:
        return ChannelConfig(carrier=self.carrier, mode=self.mode, block_size=self.block_size,
                             prng_seed=seed)

    @classmethod
    def parse(cls, d: dict | str) -> "Cell":
        if isinstance(d, str):
            parts = d.split("-")
            if parts[0] == "TUNNEL":
                return cls()
            return cls(Carrier.MEDIA, Mode(parts[1]), int(parts[2]))
        return cls(**d)


def default_matrix() -> list[Cell]:
    cells = [Cell()]
    for mode in (Mode.ADD, Mode.REPLACE):
        cells += [Cell(Carrier.MEDIA, mode, s) for s in BLOCK_SIZES]
    return cells


@dataclass
class ExperimentSpec:
    seed: int = 1
    topology: TopologySpec = field(default_factory=TopologySpec)
    mode: DeployMode = DeployMode.COMBINED
    matrix: list[Cell] = field(default_factory=default_matrix)
    users: list[int] = field(default_factory=lambda: [1, 10, 50])
    users_media: Cell = Cell(Carrier.MEDIA, Mode.ADD, 4134)
    max_media_users: int = 5
    latency_reps: int = 10
    throughput_runs: int = 5
    repeats: int = 2
    file_size: int = 250 * 1024
    latency_size: int = 1024
    transfer_timeout: float = 120.0
    include_bare: bool = True
    attack: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mode = DeployMode(self.mode)
        if any(n < 1 or n > 50 for n in self.users):
            raise ExperimentError("users must be within 1..50")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        if "topology" in d:
            d["topology"] = TopologySpec.from_dict(d["topology"] or {})
        if "matrix" in d:
            d["matrix"] = [Cell.parse(c) for c in d["matrix"]]
        if "users_media" in d:
            d["users_media"] = Cell.parse(d["users_media"])
        if isinstance(d.get("users"), int):
            d["users"] = [d["users"]]
        reps = d.pop("repetitions", None) or {}
        for src, dst in (("latency", "latency_reps"), ("throughput", "throughput_runs"),
                         ("repeats", "repeats")):
            if src in reps:
                d[dst] = reps[src]
        try:
            return cls(**d)
        except TypeError as e:
            raise ExperimentError(f"bad experiment spec: {e}") from None

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentSpec":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})


@dataclass
class Row:
    experiment: str
    config: str
    users: int
    repeat: int
    run: int
    metric: str
    value: float


def _run_seed(spec: ExperimentSpec, repeat: int) -> int:
    return spec.seed * 1000 + repeat


async def _measure(spec: ExperimentSpec, cell: Optional[Cell], repeat: int, size: int,
                   reps: int, experiment: str) -> list[Row]:
    """One emulation: optional warm-up, then ``reps`` sequential fetches."""
    seed = _run_seed(spec, repeat)
    net = build_network(spec.topology, 1, seed)
    server = (net.host("server"), HTTP_PORT)
    user = net.host(user_host(0))
    name = "BARE" if cell is None else cell.name
    dep = None
    proxy = None
    if cell is None:
        from .topology import FileServer
        await net.host("server").start_server(FileServer().handle, HTTP_PORT)
    else:
        dep = await deploy(net, [UserSetup(user_host(0), cell.channel(seed))], spec.mode, seed,
                           spec.topology)
        proxy = dep.proxy_addr(0)
        # bring the covert channels up before measuring, as a running client would
        warm = await fetch(user, proxy, ("server", HTTP_PORT), "/warmup?size=16", spec.transfer_timeout)
        if not warm.ok:
            raise ExperimentError(f"{name}: warm-up fetch failed ({warm.reply})")
    rows = []
    for run in range(reps):
        path = f"/{experiment}/{name}/{repeat}/{run}?size={size}"
        res = await fetch(user, proxy, ("server", HTTP_PORT), path, spec.transfer_timeout)
        if res.reply == "TIMEOUT":
            exc = TransferTimeout if experiment == "throughput" else RequestTimeout
            raise exc(f"{name}: {path} exceeded {spec.transfer_timeout} s")
        if not res.ok:
            raise ExperimentError(f"{name}: {path} failed ({res.reply})")
        from .topology import body_for
        if res.body != body_for(path.split("?")[0], size):
            raise TransferCorrupted(f"{name}: {path} body differs")
        if experiment == "throughput":
            value = size * 8 / res.transfer_seconds / 1000
            metric = "kbps"
        else:
            value = res.ttfb * 1000
            metric = "ttfb_ms"
        rows.append(Row(experiment, name, 1, repeat, run, metric, round(value, 6)))
    if dep is not None:
        await dep.stop()
    del server
    return rows


def _cells(spec: ExperimentSpec) -> list[Optional[Cell]]:
    return ([None] if spec.include_bare else []) + list(spec.matrix)


def run_throughput(spec: ExperimentSpec) -> list[Row]:
    """250 KB downloads: ``throughput_runs`` per emulation, ``repeats`` emulations per cell."""
    rows = []
    for cell in _cells(spec):
        for r in range(spec.repeats):
            rows += vclock.run(_measure(spec, cell, r, spec.file_size, spec.throughput_runs, "throughput"))
    return rows


def run_latency(spec: ExperimentSpec) -> list[Row]:
    """Time to first byte of a small response, ``latency_reps`` requests per emulation."""
    rows = []
    for cell in _cells(spec):
        for r in range(spec.repeats):
            rows += vclock.run(_measure(spec, cell, r, spec.latency_size, spec.latency_reps, "latency"))
    return rows


@dataclass
class UserResult:
    user: int
    carrier: str
    ok: bool
    kbps: float
    ttfb_ms: float
    sentinel_ok: bool


async def _users(spec: ExperimentSpec, n: int, repeat: int) -> list[UserResult]:
    seed = _run_seed(spec, repeat)
    net = build_network(spec.topology, n, seed)
    setups = []
    for i in range(n):
        cell = spec.users_media if i < spec.max_media_users else Cell()
        setups.append((cell, UserSetup(user_host(i), cell.channel(seed + i))))
    dep = await deploy(net, [s for _, s in setups], spec.mode, seed, spec.topology)
    server = ("server", HTTP_PORT)

    async def one(i: int) -> UserResult:
        host = net.host(user_host(i))
        warm = await fetch(host, dep.proxy_addr(i), server, f"/warm/{i}?size=16", spec.transfer_timeout)
        if not warm.ok:
            return UserResult(i, setups[i][0].name, False, 0.0, 0.0, False)
        return i

    warmed = await asyncio.gather(*(one(i) for i in range(n)))
    failed = [w for w in warmed if isinstance(w, UserResult)]
    if failed:
        raise ExperimentError(f"{len(failed)} of {n} users could not reach the server")

    async def download(i: int) -> UserResult:
        from .topology import body_for
        host = net.host(user_host(i))
        path = f"/user/{i}"
        res = await fetch(host, dep.proxy_addr(i), server, f"{path}?size={spec.file_size}",
                          spec.transfer_timeout)
        sentinel = res.body == body_for(path, spec.file_size)
        kbps = spec.file_size * 8 / res.transfer_seconds / 1000 if res.ok else 0.0
        return UserResult(i, setups[i][0].name, res.ok, round(kbps, 6), round(res.ttfb * 1000, 6),
                          sentinel)

    results = await asyncio.gather(*(download(i) for i in range(n)))
    await dep.stop()
    return list(results)


def run_users(spec: ExperimentSpec, n: int, repeat: int = 0) -> list[UserResult]:
    """``n`` concurrent users: up to ``max_media_users`` on the media carrier, the rest tunnelled."""
    if not 1 <= n <= 50:
        raise ExperimentError("n must be within 1..50")
    results = vclock.run(_users(spec, n, repeat))
    bad = [r for r in results if not (r.ok and r.sentinel_ok)]
    if bad:
        raise ExperimentError(
            "user failures: " + ", ".join(f"u{r.user}({r.carrier}, ok={r.ok}, sentinel={r.sentinel_ok})"
                                          for r in bad))
    return results


def users_rows(results: list[UserResult], n: int, repeat: int = 0) -> list[Row]:
    rows = []
    for r in results:
        rows.append(Row("users", r.carrier, n, repeat, r.user, "kbps", r.kbps))
        rows.append(Row("users", r.carrier, n, repeat, r.user, "ttfb_ms", r.ttfb_ms))
    return rows


FIELDS = [f for f in Row.__dataclass_fields__]


def rows_to_csv(rows: list[Row]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIELDS)
    for r in rows:
        d = asdict(r)
        d["value"] = f"{r.value:.6f}" if isinstance(r.value, float) else r.value
        w.writerow([d[f] for f in FIELDS])
    return buf.getvalue()


def summarize(rows: list[Row]) -> dict:
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r.experiment, r.config, r.users, r.metric), []).append(float(r.value))
    out = []
    for (exp, cfg, users, metric), vals in groups.items():
        out.append({"experiment": exp, "config": cfg, "users": users, "metric": metric,
                    "n": len(vals), "mean": round(statistics.fmean(vals), 6),
                    "median": round(statistics.median(vals), 6),
                    "stdev": round(statistics.pstdev(vals), 6)})
    return {"groups": out}


def emit_report(rows: list[Row], out: str | Path, extra: Optional[dict] = None) -> tuple[Path, Path]:
    """Write ``results.csv`` and ``summary.json`` under ``out``; byte-stable for equal rows."""
    if not rows:
        raise ExperimentError("no results to report")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / "results.csv", out / "summary.json"
    csv_path.write_text(rows_to_csv(rows))
    summary = summarize(rows)
    if extra:
        summary.update(extra)
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path
