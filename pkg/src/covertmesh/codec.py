"""Encapsulation of covert data blocks into media frames and tunnel records.

Wire layout of a fragment header (20 bytes, big-endian)::

    magic(2) stream_id(4) block_seq(4) frag_index(2) frag_count(2)
    payload_len(2) checksum(4)

The checksum is CRC-32 over the header with the checksum field zeroed,
followed by the covert payload bytes.
"""

from __future__ import annotations

import asyncio
import enum
import random
import struct
import threading
import time
import zlib
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional

MAGIC = 0x544B
HEADER_LEN = 20
BLOCK_SIZES = (536, 1050, 2078, 4134)
# frag_count value used by streaming (REPLACE) fragments whose total is not
# yet known; the final fragment carries frag_index + 1.
FRAG_COUNT_OPEN = 0xFFFF

_HEADER = struct.Struct(">HIIHHHI")
assert _HEADER.size == HEADER_LEN


class CodecError(Exception):
    pass


class CapacityTooSmall(CodecError, ValueError):
    pass


class ChecksumMismatch(CodecError):
    pass


class IncompleteBlock(CodecError):
    pass


class Mode(str, enum.Enum):
    ADD = "ADD"
    REPLACE = "REPLACE"


class FrameKind(str, enum.Enum):
    KEY = "KEY"
    DELTA = "DELTA"


@dataclass(frozen=True)
class DataBlock:
    stream_id: int
    block_seq: int
    payload: bytes


@dataclass(frozen=True)
class FragmentHeader:
    stream_id: int
    block_seq: int
    frag_index: int
    frag_count: int
    payload_len: int
    checksum: int = 0
    magic: int = MAGIC

    def pack(self) -> bytes:
        return _HEADER.pack(self.magic, self.stream_id, self.block_seq, self.frag_index,
                            self.frag_count, self.payload_len, self.checksum)

    @classmethod
    def unpack(cls, data: bytes) -> "FragmentHeader":
        if len(data) < HEADER_LEN:
            raise CodecError(f"need {HEADER_LEN} header bytes, got {len(data)}")
        magic, sid, seq, idx, cnt, plen, crc = _HEADER.unpack_from(data)
        return cls(sid, seq, idx, cnt, plen, crc, magic)


def _crc(header: FragmentHeader, payload: bytes) -> int:
    zeroed = replace(header, checksum=0).pack()
    return zlib.crc32(payload, zlib.crc32(zeroed)) & 0xFFFFFFFF


def seal(header: FragmentHeader, payload: bytes) -> FragmentHeader:
    """Return ``header`` with payload_len and checksum filled in for ``payload``."""
    header = replace(header, payload_len=len(payload), checksum=0)
    return replace(header, checksum=_crc(header, payload))


def verify(header: FragmentHeader, payload: bytes) -> bool:
    return (header.magic == MAGIC and header.payload_len == len(payload)
            and header.frag_index < header.frag_count
            and _crc(header, payload) == header.checksum)


def encode_fragment(header: FragmentHeader, payload: bytes) -> bytes:
    return seal(header, payload).pack() + payload


def decode_fragment(data: bytes) -> tuple[FragmentHeader, bytes]:
    """Parse one header+payload unit, raising ChecksumMismatch if it does not verify."""
    header = FragmentHeader.unpack(data)
    payload = bytes(data[HEADER_LEN:HEADER_LEN + header.payload_len])
    if not verify(header, payload):
        raise ChecksumMismatch(f"fragment {header.block_seq}/{header.frag_index} failed CRC")
    return header, payload


def fragment(block: DataBlock, capacity: int) -> list[tuple[FragmentHeader, bytes]]:
    """Split ``block`` into carrier units of at most ``capacity`` bytes each."""
    if capacity < HEADER_LEN + 1:
        raise CapacityTooSmall(f"capacity {capacity} leaves no room for data")
    room = capacity - HEADER_LEN
    data = block.payload
    count = max(1, -(-len(data) // room))
    out = []
    for i in range(count):
        chunk = data[i * room:(i + 1) * room]
        hdr = seal(FragmentHeader(block.stream_id, block.block_seq, i, count, 0), chunk)
        out.append((hdr, chunk))
    return out


def reassemble(fragments: Iterable[tuple[FragmentHeader, bytes]]) -> DataBlock:
    """Rebuild a block from its fragments in any order; duplicates are ignored."""
    parts: dict[int, bytes] = {}
    key = None
    count = FRAG_COUNT_OPEN
    for hdr, payload in fragments:
        if not verify(hdr, payload):
            raise ChecksumMismatch(f"fragment {hdr.block_seq}/{hdr.frag_index} failed CRC")
        k = (hdr.stream_id, hdr.block_seq)
        if key is None:
            key = k
        elif k != key:
            raise CodecError(f"fragment of block {k} mixed into block {key}")
        count = min(count, hdr.frag_count)
        parts.setdefault(hdr.frag_index, payload)
    if key is None or count == FRAG_COUNT_OPEN or any(i not in parts for i in range(count)):
        raise IncompleteBlock(f"block {key} is missing fragments")
    return DataBlock(key[0], key[1], b"".join(parts[i] for i in range(count)))


@dataclass
class CodecStats:
    fragments: int = 0
    blocks: int = 0
    checksum_failures: int = 0
    abandoned_blocks: int = 0


class Reassembler:
    """Incremental reassembly with a bounded in-flight window per stream.

    At most ``max_in_flight`` partial blocks are held per stream; the oldest
    is abandoned when the window overflows, and :meth:`expire` abandons
    blocks older than ``timeout`` seconds on ``clock``.
    """

    def __init__(self, max_in_flight: int = 64, timeout: float = 10.0,
                 clock: Callable[[], float] = time.monotonic,
                 stats: Optional[CodecStats] = None):
        self.max_in_flight = max_in_flight
        self.timeout = timeout
        self.clock = clock
        self.stats = stats if stats is not None else CodecStats()
        # (stream_id, block_seq) -> [first_seen, count, {index: payload}]
        self._pending: dict[tuple[int, int], list] = {}

    def __len__(self) -> int:
        return len(self._pending)

    def offer(self, header: FragmentHeader, payload: bytes) -> Optional[DataBlock]:
        if not verify(header, payload):
            self.stats.checksum_failures += 1
            return None
        self.stats.fragments += 1
        key = (header.stream_id, header.block_seq)
        entry = self._pending.get(key)
        if entry is None:
            in_stream = [k for k in self._pending if k[0] == header.stream_id]
            if len(in_stream) >= self.max_in_flight:
                del self._pending[in_stream[0]]
                self.stats.abandoned_blocks += 1
            entry = self._pending[key] = [self.clock(), FRAG_COUNT_OPEN, {}]
        entry[1] = min(entry[1], header.frag_count)
        entry[2].setdefault(header.frag_index, payload)
        count, parts = entry[1], entry[2]
        if count != FRAG_COUNT_OPEN and all(i in parts for i in range(count)):
            del self._pending[key]
            self.stats.blocks += 1
            return DataBlock(key[0], key[1], b"".join(parts[i] for i in range(count)))
        return None

    def expire(self) -> list[tuple[int, int]]:
        """Abandon stale partial blocks; returns their (stream_id, block_seq) keys."""
        now = self.clock()
        stale = [k for k, e in self._pending.items() if now - e[0] > self.timeout]
        for k in stale:
            del self._pending[k]
        self.stats.abandoned_blocks += len(stale)
        return stale


@dataclass(frozen=True)
class MediaFrame:
    frame_id: int
    kind: FrameKind
    header_bytes: bytes
    payload: bytes
    timestamp: int  # microseconds since channel epoch

    def __len__(self) -> int:
        return len(self.header_bytes) + len(self.payload)

    def to_bytes(self) -> bytes:
        return self.header_bytes + self.payload


def encode_add(frame: MediaFrame, block: DataBlock) -> MediaFrame:
    """Append one whole block (header + payload) after the frame's own payload."""
    attachment = encode_fragment(FragmentHeader(block.stream_id, block.block_seq, 0, 1, 0),
                                 block.payload)
    return replace(frame, payload=frame.payload + attachment)


class ReplaceEncoder:
    """Overwrites frame payloads with at most one fragment each.

    Frame lengths are never changed. When no block is pending the payload is a
    cover header (payload_len 0) followed by pseudorandom fill from ``seed``.
    """

    def __init__(self, queue: "BlockQueue", seed: int = 0, elide_padding: bool = False):
        self.queue = queue
        self.rng = random.Random(seed)
        # send only up to the last non-zero byte; the receiver zero-fills to block size
        self.elide_padding = elide_padding
        self._block: Optional[DataBlock] = None
        self._end = 0
        self._offset = 0
        self._index = 0

    @property
    def idle(self) -> bool:
        return self._block is None and len(self.queue) == 0

    def encode(self, frame: MediaFrame) -> MediaFrame:
        size = len(frame.payload)
        if size < HEADER_LEN + 1:
            return frame
        room = size - HEADER_LEN
        if self._block is None:
            self._block = self.queue.get_nowait()
            self._offset = self._index = 0
            if self._block is not None:
                p = self._block.payload
                self._end = max(1, len(p.rstrip(b"\0"))) if self.elide_padding else len(p)
        block = self._block
        if block is None:
            hdr = seal(FragmentHeader(0, 0, 0, 1, 0), b"")
            return replace(frame, payload=hdr.pack() + self.rng.randbytes(room))
        chunk = block.payload[self._offset:min(self._offset + room, self._end)]
        self._offset += len(chunk)
        last = self._offset >= self._end
        count = self._index + 1 if last else FRAG_COUNT_OPEN
        hdr = seal(FragmentHeader(block.stream_id, block.block_seq, self._index, count, 0), chunk)
        self._index += 1
        if last:
            self._block = None
        fill = self.rng.randbytes(room - len(chunk))
        return replace(frame, payload=hdr.pack() + chunk + fill)


def encode_replace(frame: MediaFrame, queue: "BlockQueue", cursor: ReplaceEncoder) -> MediaFrame:
    """Functional form of :meth:`ReplaceEncoder.encode`; ``cursor`` must wrap ``queue``."""
    if cursor.queue is not queue:
        raise CodecError("cursor is bound to a different queue")
    return cursor.encode(frame)


def decode_frame(frame: MediaFrame, mode: Mode, block_sizes: Iterable[int] = BLOCK_SIZES,
                 stats: Optional[CodecStats] = None
                 ) -> tuple[list[tuple[FragmentHeader, bytes]], Optional[MediaFrame]]:
    """Extract covert fragments from ``frame``.

    Returns the verified fragments and, in ADD mode, the cover frame with the
    attachment stripped (the frame itself when nothing was attached). Cover
    fragments (payload_len 0) are swallowed. Fragments failing CRC are dropped
    and counted in ``stats``.
    """
    payload = frame.payload
    if Mode(mode) is Mode.REPLACE:
        if len(payload) < HEADER_LEN + 1:
            return [], None
        hdr = FragmentHeader.unpack(payload)
        body = payload[HEADER_LEN:HEADER_LEN + hdr.payload_len]
        if not verify(hdr, body):
            if stats is not None:
                stats.checksum_failures += 1
            return [], None
        return ([(hdr, body)] if hdr.payload_len else []), None

    for size in dict.fromkeys(block_sizes):
        at = len(payload) - HEADER_LEN - size
        if at < 0:
            continue
        hdr = FragmentHeader.unpack(payload[at:at + HEADER_LEN])
        if hdr.magic != MAGIC or hdr.payload_len != size:
            continue
        body = payload[at + HEADER_LEN:]
        cover = replace(frame, payload=payload[:at])
        if not verify(hdr, body):
            if stats is not None:
                stats.checksum_failures += 1
            return [], cover
        return [(hdr, body)], cover
    return [], frame


class BlockQueue:
    """Bounded FIFO of pending blocks shared by one producer and one consumer.

    ``put`` blocks while the queue is full; nothing is ever dropped. The
    ``on_high_water`` callback fires each time the queue becomes full.
    Producers running on an asyncio loop use :meth:`aput` instead.
    """

    def __init__(self, capacity: int = 1024,
                 on_high_water: Optional[Callable[["BlockQueue"], None]] = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.on_high_water = on_high_water
        self._items: deque[DataBlock] = deque()
        self._cond = threading.Condition()
        self._async_waiters: deque[asyncio.Future] = deque()

    def __len__(self) -> int:
        return len(self._items)

    def full(self) -> bool:
        return len(self._items) >= self.capacity

    def _append(self, block: DataBlock) -> None:
        self._items.append(block)
        self._cond.notify_all()
        if self.full() and self.on_high_water is not None:
            self.on_high_water(self)

    def put(self, block: DataBlock, timeout: Optional[float] = None) -> None:
        with self._cond:
            if not self._cond.wait_for(lambda: not self.full(), timeout):
                raise TimeoutError("block queue full")
            self._append(block)

    async def aput(self, block: DataBlock) -> None:
        while self.full():
            fut = asyncio.get_running_loop().create_future()
            self._async_waiters.append(fut)
            await fut
        with self._cond:
            self._append(block)

    def get(self, timeout: Optional[float] = None) -> DataBlock:
        with self._cond:
            if not self._cond.wait_for(lambda: len(self._items) > 0, timeout):
                raise TimeoutError("block queue empty")
            return self._pop()

    def get_nowait(self) -> Optional[DataBlock]:
        with self._cond:
            return self._pop() if self._items else None

    def _pop(self) -> DataBlock:
        block = self._items.popleft()
        self._cond.notify_all()
        while self._async_waiters:
            fut = self._async_waiters.popleft()
            if not fut.done():
                loop = fut.get_loop()
                if _running_loop() is loop:
                    loop.call_soon(_wake, fut)
                else:
                    loop.call_soon_threadsafe(_wake, fut)
                break
        return block


def _running_loop() -> Optional[asyncio.AbstractEventLoop]:
    try:
        return asyncio.get_running_loop()
    except RuntimeError:
        return None


def _wake(fut: asyncio.Future) -> None:
    if not fut.done():
        fut.set_result(None)
