"""Fixed-length feature vectors for passive flow correlation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..harness.emulator import Direction
from .trace import FlowTrace


class EmptyTrace(ValueError):
    pass


@dataclass(frozen=True)
class WindowConfig:
    window_ms: float = 500.0
    n_windows: int = 60
    burst_gap_ms: float = 50.0

    @property
    def length(self) -> int:
        return 2 * self.n_windows + len(SUMMARY_NAMES)


SUMMARY_NAMES = (
    "size_mean", "size_var", "size_max",
    "iat_mean", "iat_var", "iat_max",
    "count_in", "count_out", "count", "bursts",
)


def extract_features(trace: FlowTrace, cfg: WindowConfig = WindowConfig(),
                     origin_us: Optional[int] = None) -> np.ndarray:
    """Window byte volumes (in, then out) followed by summary statistics.

    Windows start at ``origin_us`` (default: the first packet). Packets past
    the last window only count toward the summary statistics. Inter-arrival
    times are in milliseconds.
    """
    if not len(trace):
        raise EmptyTrace(f"trace {trace.flow_id!r} has no packets")
    t = np.array([r[0] for r in trace.records], dtype=np.int64)
    size = np.array([r[1] for r in trace.records], dtype=np.float64)
    inbound = np.array([r[2] is Direction.IN for r in trace.records])
    origin = t[0] if origin_us is None else origin_us

    vols = np.zeros((2, cfg.n_windows))
    idx = np.floor((t - origin) / (cfg.window_ms * 1000)).astype(np.int64)
    ok = (idx >= 0) & (idx < cfg.n_windows)
    np.add.at(vols[0], idx[ok & inbound], size[ok & inbound])
    np.add.at(vols[1], idx[ok & ~inbound], size[ok & ~inbound])

    iat = np.diff(t) / 1000.0
    if iat.size == 0:
        iat = np.zeros(1)
    bursts = 1 + int(np.sum(iat > cfg.burst_gap_ms)) if len(t) > 1 else 1
    summary = np.array([
        size.mean(), size.var(), size.max(),
        iat.mean(), iat.var(), iat.max(),
        inbound.sum(), (~inbound).sum(), len(t), bursts,
    ], dtype=np.float64)
    return np.concatenate([vols[0], vols[1], summary])
