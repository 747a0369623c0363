"""Flow traces as seen from an adversary's vantage point."""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

from ..harness.emulator import Direction, Tap, TapRecord


class Vantage(str, enum.Enum):
    USER_SIDE = "USER_SIDE"
    PROXY_SIDE = "PROXY_SIDE"
    EXIT_SIDE = "EXIT_SIDE"


class TraceError(ValueError):
    pass


@dataclass
class FlowTrace:
    flow_id: str
    vantage: Vantage = Vantage.EXIT_SIDE
    # (timestamp_us, size_bytes, direction)
    records: list[tuple[int, int, Direction]] = field(default_factory=list)

    def __post_init__(self):
        self.vantage = Vantage(self.vantage)
        self.records = [(int(t), int(s), Direction(d)) for t, s, d in self.records]
        self.validate()

    def validate(self) -> None:
        prev = None
        for t, s, _ in self.records:
            if s <= 0:
                raise TraceError(f"non-positive packet size {s}")
            if prev is not None and t < prev:
                raise TraceError("timestamps must be non-decreasing")
            prev = t

    def __len__(self) -> int:
        return len(self.records)

    @property
    def duration_us(self) -> int:
        return self.records[-1][0] - self.records[0][0] if self.records else 0

    def only(self, direction: Direction) -> "FlowTrace":
        return FlowTrace(self.flow_id, self.vantage,
                         [r for r in self.records if r[2] is Direction(direction)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["timestamp_us", "size_bytes", "direction"])
        for t, s, d in self.records:
            w.writerow([t, s, d.value])
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str, flow_id: str = "", vantage: Vantage = Vantage.EXIT_SIDE) -> "FlowTrace":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["timestamp_us", "size_bytes", "direction"]:
            raise TraceError("missing trace header")
        return cls(flow_id, vantage, [(int(t), int(s), d) for t, s, d in rows[1:] if t])

    @classmethod
    def load(cls, path: str | Path, vantage: Vantage = Vantage.EXIT_SIDE) -> "FlowTrace":
        path = Path(path)
        return cls.from_csv(path.read_text(), path.stem, vantage)


def _flow_name(flow: tuple) -> str:
    return "-".join(str(x) for x in flow)


def capture(tap: Tap, vantage: Vantage = Vantage.EXIT_SIDE,
            select: Optional[Callable[[tuple], bool]] = None,
            start: float = 0.0, duration: Optional[float] = None) -> dict[tuple, FlowTrace]:
    """Split what ``tap`` recorded into one FlowTrace per connection.

    ``start``/``duration`` (emulated seconds) bound the capture window.
    Control packets (handshake, FIN) are kept; they are on the wire too.
    """
    lo = round(start * 1e6)
    hi = None if duration is None else lo + round(duration * 1e6)
    out: dict[tuple, FlowTrace] = {}
    grouped: dict[tuple, list[TapRecord]] = {}
    for r in tap.records:
        if r.timestamp_us < lo or (hi is not None and r.timestamp_us >= hi):
            continue
        if select is not None and not select(r.flow):
            continue
        grouped.setdefault(r.flow, []).append(r)
    for flow, recs in grouped.items():
        # records are appended when a packet is offered; departures of the two
        # directions interleave, so order by departure time
        recs.sort(key=lambda r: r.timestamp_us)
        out[flow] = FlowTrace(_flow_name(flow), vantage,
                              [(r.timestamp_us, r.size, r.direction) for r in recs])
    return out


def merge(traces: Iterable[FlowTrace], flow_id: str, vantage: Vantage) -> FlowTrace:
    """One trace out of several connections (stable time order)."""
    recs = sorted((r for t in traces for r in t.records), key=lambda r: r[0])
    return FlowTrace(flow_id, vantage, recs)
