"""Timing watermarks: slot-wise delay injection and a matched-filter detector."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ..harness.emulator import DelayTap, Direction, Packet, VirtualNetwork
from .trace import FlowTrace


class TraceTooShort(ValueError):
    pass


@dataclass(frozen=True)
class WatermarkPattern:
    bits: tuple[int, ...]
    slot_ms: float = 400.0
    delay_ms: float = 150.0

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(int(b) for b in self.bits))
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError("watermark bits must be 0 or 1")
        if not 0 <= self.delay_ms < self.slot_ms:
            raise ValueError("delay_ms must be below slot_ms")

    @classmethod
    def random(cls, seed: int, n_bits: int = 16, slot_ms: float = 400.0,
               delay_ms: float = 150.0) -> "WatermarkPattern":
        rng = random.Random(seed)
        while True:
            bits = tuple(rng.randrange(2) for _ in range(n_bits))
            if 0 < sum(bits) < n_bits:
                return cls(bits, slot_ms, delay_ms)

    @property
    def period_ms(self) -> float:
        return len(self.bits) * self.slot_ms

    @property
    def non_degenerate(self) -> bool:
        return 0 < sum(self.bits) < len(self.bits)

    def bit_at(self, t_ms: float) -> int:
        return self.bits[int((t_ms % self.period_ms) // self.slot_ms)]

    def delay_fn(self, epoch: float = 0.0) -> Callable[[float], float]:
        """Seconds of extra delay for a packet offered at emulated time ``t``."""
        def fn(t: float) -> float:
            return self.delay_ms / 1000 if self.bit_at((t - epoch) * 1000) else 0.0
        return fn


def apply_watermark(trace: FlowTrace, pattern: WatermarkPattern,
                    epoch_us: int = 0) -> tuple[FlowTrace, list[int]]:
    """Offline injection on a recorded trace.

    Packets in marked slots move ``delay_ms`` later. Packets that would then
    overtake a delayed one wait behind it (FIFO), so they can pick up part of
    the delay. Returns the new trace and the delay applied to each packet in
    microseconds; subtracting those restores the input exactly.
    """
    fn = pattern.delay_fn(epoch_us / 1e6)
    out, applied = [], []
    last = None
    for t, s, d in trace.records:
        nt = t + round(fn(t / 1e6) * 1e6)
        if last is not None and nt < last:
            nt = last
        last = nt
        out.append((nt, s, d))
        applied.append(nt - t)
    return FlowTrace(trace.flow_id, trace.vantage, out), applied


def inject_watermark(net: VirtualNetwork, a: str, b: str, pattern: WatermarkPattern,
                     match: Optional[Callable[[Packet, Direction], bool]] = None,
                     epoch: Optional[float] = None) -> DelayTap:
    """Install an active tap on link a-b that delays packets in marked slots.

    The tap acts where packets are offered to the link, so order and contents
    are untouched and departures stay non-decreasing.
    """
    epoch = net.now() if epoch is None else epoch
    tap = DelayTap(pattern.delay_fn(epoch), match or (lambda p, d: True), name="watermark")
    net.tap(a, b, tap)
    return tap


def slot_profile(times_us: np.ndarray, slot_us: float, lag_us: float,
                 epoch_us: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Mean inter-arrival time per slot; returns (absolute slot index, mean)."""
    iat = np.diff(times_us)
    at = times_us[1:]
    k = np.floor((at - epoch_us - lag_us) / slot_us).astype(np.int64)
    first, last = k[0], k[-1]
    inner = (k > first) & (k < last)  # drop the partial edge slots
    if not inner.any():
        return np.empty(0, np.int64), np.empty(0)
    k, iat = k[inner], iat[inner]
    uniq, inv = np.unique(k, return_inverse=True)
    sums = np.bincount(inv, weights=iat)
    counts = np.bincount(inv)
    return uniq, sums / counts


def watermark_score(trace: FlowTrace, pattern: WatermarkPattern, epoch_us: int = 0,
                    max_lag_ms: Optional[float] = None, step_ms: Optional[float] = None,
                    direction: Optional[Direction] = None) -> float:
    """Best Pearson correlation between the slot profile and the edge template.

    Delaying a marked slot opens a gap where it starts and squeezes packets
    together where it ends, so the template for slot k is b[k] - b[k-1].
    The slot phase is searched over lags in [0, max_lag_ms].
    """
    recs = trace.records if direction is None else [r for r in trace.records if r[2] is direction]
    if len(recs) < 3:
        raise TraceTooShort("too few packets to score")
    times = np.array([r[0] for r in recs], dtype=np.float64)
    if times[-1] - times[0] < 2 * pattern.period_ms * 1000:
        raise TraceTooShort(
            f"trace spans {(times[-1] - times[0]) / 1e3:.0f} ms, need {2 * pattern.period_ms:.0f} ms")
    slot_us = pattern.slot_ms * 1000
    max_lag = pattern.slot_ms if max_lag_ms is None else max_lag_ms
    step = pattern.slot_ms / 8 if step_ms is None else step_ms
    bits = np.array(pattern.bits, dtype=np.float64)
    edge = bits - np.roll(bits, 1)
    n = len(bits)
    best = -1.0
    for lag in np.arange(0.0, max_lag + 1e-9, step):
        k, prof = slot_profile(times, slot_us, lag * 1000, epoch_us)
        if len(prof) < 3:
            continue
        tmpl = edge[k % n]
        if prof.std() == 0 or tmpl.std() == 0:
            continue
        r = float(np.corrcoef(prof, tmpl)[0, 1])
        best = max(best, r)
    return best


def detect_watermark(trace: FlowTrace, pattern: WatermarkPattern, theta: float,
                     **kw) -> tuple[float, bool]:
    score = watermark_score(trace, pattern, **kw)
    return score, score > theta


def calibrate_threshold(null_scores: Sequence[float], target_fpr: float = 0.05) -> float:
    """Threshold whose false-positive rate on ``null_scores`` is at most ``target_fpr``."""
    s = np.asarray(null_scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("no calibration scores")
    return float(np.quantile(s, 1 - target_fpr, method="higher"))
