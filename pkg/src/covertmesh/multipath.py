"""Splitting a stream's blocks over K proxy paths and re-joining them in order."""

from __future__ import annotations

import enum
import random
import threading
import time
from dataclasses import dataclass
from fractions import Fraction
from math import lcm
from typing import Callable, Iterable, Optional, Sequence


class MultipathError(Exception):
    pass


class GapTimeout(MultipathError):
    def __init__(self, seq: int):
        super().__init__(f"block {seq} missing past the gap timeout")
        self.seq = seq


class BufferOverflow(MultipathError):
    pass


class InsufficientProxies(MultipathError):
    pass


class PathValidationError(MultipathError, ValueError):
    pass


class Policy(str, enum.Enum):
    ROUND_ROBIN = "ROUND_ROBIN"
    WEIGHTED = "WEIGHTED"


@dataclass(frozen=True)
class PathSpec:
    path_id: int
    hops: tuple[int, ...]
    weight: Fraction = Fraction(1)

    def __post_init__(self):
        object.__setattr__(self, "hops", tuple(self.hops))
        object.__setattr__(self, "weight", Fraction(self.weight))
        if not self.hops:
            raise PathValidationError(f"path {self.path_id} has no hops")
        if self.weight <= 0:
            raise PathValidationError(f"path {self.path_id} weight must be positive")
        if not 0 <= self.path_id <= 0xFFFF:
            raise PathValidationError("path_id must fit 16 bits")

    @property
    def rendezvous(self) -> int:
        return self.hops[-1]


@dataclass
class MultipathCircuit:
    circuit_id: int
    paths: list[PathSpec]
    policy: Policy = Policy.ROUND_ROBIN

    def __post_init__(self):
        self.policy = Policy(self.policy)
        if not self.paths:
            raise PathValidationError("a circuit needs at least one path")
        if len({p.rendezvous for p in self.paths}) != 1:
            raise PathValidationError("all paths of a circuit must end at the same rendezvous")
        if len({p.path_id for p in self.paths}) != len(self.paths):
            raise PathValidationError("duplicate path_id in circuit")

    @property
    def k(self) -> int:
        return len(self.paths)


class Splitter:
    """Deterministic block-to-path assignment.

    ROUND_ROBIN sends block i to the (i mod K)-th live path. WEIGHTED repeats a
    fixed schedule of length sum(weights) built by always serving the path with
    the smallest deficit (served + 1) / weight, ties to the lower index. Either
    way the assignment depends only on the block sequence number, the policy,
    the weights and the set of live paths.
    """

    def __init__(self, circuit: MultipathCircuit):
        self.circuit = circuit
        self.live = [p.path_id for p in circuit.paths]
        self.lost: dict[int, list[int]] = {}
        self._table = self._schedule()

    def _schedule(self) -> list[int]:
        paths = [p for p in self.circuit.paths if p.path_id in self.live]
        if not paths:
            return []
        if self.circuit.policy is Policy.ROUND_ROBIN:
            return [p.path_id for p in paths]
        scale = lcm(*(p.weight.denominator for p in paths))
        weights = [int(p.weight * scale) for p in paths]
        served = [0] * len(paths)
        table = []
        for _ in range(sum(weights)):
            i = min(range(len(paths)), key=lambda j: (Fraction(served[j] + 1, weights[j]), j))
            served[i] += 1
            table.append(paths[i].path_id)
        return table

    def assign(self, block_seq: int) -> int:
        if not self._table:
            raise MultipathError("no live paths left")
        return self._table[block_seq % len(self._table)]

    def mark_dead(self, path_id: int, unacked: Iterable[int] = ()) -> None:
        """Drop a failed path; ``unacked`` block seqs already sent on it are recorded as lost."""
        if path_id in self.live:
            self.live.remove(path_id)
            self.lost[path_id] = list(unacked)
            self._table = self._schedule()


def split(blocks: Iterable, circuit: MultipathCircuit) -> dict[int, list]:
    """Assign each block (anything with ``block_seq``) to one path of ``circuit``."""
    splitter = Splitter(circuit)
    out: dict[int, list] = {p.path_id: [] for p in circuit.paths}
    for b in blocks:
        out[splitter.assign(b.block_seq)].append(b)
    return out


class Joiner:
    """Reorders arrivals from K paths into strictly increasing sequence order.

    Up to ``max_buffer`` out-of-order items are held. A gap that has stayed open
    for more than ``gap_timeout`` seconds raises :class:`GapTimeout` from
    :meth:`check` (and from :meth:`push`).
    """

    def __init__(self, max_buffer: int = 256, gap_timeout: float = 10.0,
                 clock: Callable[[], float] = time.monotonic, start_seq: int = 0):
        self.max_buffer = max_buffer
        self.gap_timeout = gap_timeout
        self.clock = clock
        self.next_seq = start_seq
        self._held: dict[int, object] = {}
        self._gap_since: Optional[float] = None
        self.duplicates = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._held)

    def push(self, seq: int, item) -> list:
        with self._lock:
            return self._push(seq, item)

    def _push(self, seq: int, item) -> list:
        if seq < self.next_seq or seq in self._held:
            self.duplicates += 1
            return []
        if seq != self.next_seq and len(self._held) >= self.max_buffer:
            raise BufferOverflow(f"{len(self._held)} blocks buffered waiting for {self.next_seq}")
        self._held[seq] = item
        out = []
        while self.next_seq in self._held:
            out.append(self._held.pop(self.next_seq))
            self.next_seq += 1
        if self._held:
            if out or self._gap_since is None:
                self._gap_since = self.clock()
        else:
            self._gap_since = None
        self.check()
        return out

    def check(self) -> None:
        if self._gap_since is not None and self.clock() - self._gap_since > self.gap_timeout:
            raise GapTimeout(self.next_seq)


def join(arrivals: Iterable[tuple[float, object]], circuit: MultipathCircuit,
         max_buffer: int = 256, gap_timeout: float = 10.0) -> tuple[list, Optional[GapTimeout]]:
    """Offline join over (arrival_time, block) pairs merged from all paths.

    Returns the in-order blocks delivered and the GapTimeout that ended the
    stream, if any. Arrival times are the emulated clock.
    """
    now = [0.0]
    joiner = Joiner(max_buffer, gap_timeout, clock=lambda: now[0])
    out: list = []
    for t, block in sorted(arrivals, key=lambda a: a[0]):
        now[0] = t
        try:
            joiner.check()
            out.extend(joiner.push(block.block_seq, block))
        except GapTimeout as e:
            return out, e
    if len(joiner):
        now[0] = float("inf")
        try:
            joiner.check()
        except GapTimeout as e:
            return out, e
    return out, None


class PathPolicy(str, enum.Enum):
    MANUAL = "MANUAL"
    AUTO = "AUTO"


def choose_paths(proxies: Sequence[int], k: int, policy: PathPolicy | str, seed: int = 0, *,
                 rendezvous: int, manual: Sequence[PathSpec] = (), known: Iterable[int] = (),
                 min_hops: int = 1, max_hops: int = 3) -> list[PathSpec]:
    """Pick ``k`` paths ending at ``rendezvous``.

    MANUAL validates and returns ``manual``. AUTO draws node-disjoint paths of
    uniform length in [min_hops, max_hops] from ``proxies`` with ``seed``.
    """
    policy = PathPolicy(policy)
    if policy is PathPolicy.MANUAL:
        universe = set(proxies) | set(known) | {rendezvous}
        for p in manual:
            unknown = [h for h in p.hops if h not in universe]
            if unknown:
                raise PathValidationError(f"path {p.path_id} names unknown nodes {unknown}")
        MultipathCircuit(0, list(manual))
        return list(manual)

    pool = sorted(set(proxies) - {rendezvous})
    if k < 1 or len(pool) < k * min_hops:
        raise InsufficientProxies(f"need {k * min_hops} proxies for {k} paths, have {len(pool)}")
    rng = random.Random(seed)
    rng.shuffle(pool)
    paths = []
    for i in range(k):
        spare = len(pool) - (k - i - 1) * min_hops
        hops = min(rng.randint(min_hops, max_hops), spare)
        chosen, pool = pool[:hops], pool[hops:]
        paths.append(PathSpec(i, tuple(chosen) + (rendezvous,)))
    return paths


def parse_paths(text: str) -> list[PathSpec]:
    """Parse ``path_id: node,node,...,node [weight]`` lines; ``#`` starts a comment."""
    paths = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, sep, rest = line.partition(":")
        if not sep:
            raise PathValidationError(f"line {lineno}: expected 'path_id: hops'")
        parts = rest.split()
        if not parts or len(parts) > 2:
            raise PathValidationError(f"line {lineno}: expected hops and optional weight")
        try:
            hops = tuple(int(h) for h in parts[0].split(",") if h)
            weight = Fraction(parts[1]) if len(parts) == 2 else Fraction(1)
            paths.append(PathSpec(int(head), hops, weight))
        except ValueError as e:
            raise PathValidationError(f"line {lineno}: {e}") from None
    return paths


def format_paths(paths: Iterable[PathSpec]) -> str:
    lines = []
    for p in paths:
        line = f"{p.path_id}: {','.join(map(str, p.hops))}"
        if p.weight != 1:
            line += f" {p.weight}"
        lines.append(line)
    return "\n".join(lines) + "\n"
