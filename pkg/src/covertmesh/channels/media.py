"""Emulated conference video stream and its covert send/receive loops."""

from __future__ import annotations

import asyncio
import random
import struct
from dataclasses import dataclass

from ..codec import (BlockQueue, CodecStats, DataBlock, FrameKind, MediaFrame, Mode,
                     Reassembler, ReplaceEncoder, decode_frame, encode_add)
from .config import ChannelConfig

AUDIO_RATE = 50  # packets per second
AUDIO_PACKET = 120

# on-wire record kinds for the media transport
REC_KEY, REC_DELTA, REC_AUDIO, REC_CLOSE = 0, 1, 2, 3
_REC = struct.Struct(">IB")


class FrameSource:
    """Deterministic cover video: frame sizes and cadence from the channel seed."""

    def __init__(self, cfg: ChannelConfig, seed: int | None = None):
        self.cfg = cfg
        self.rng = random.Random(cfg.prng_seed if seed is None else seed)
        self.frame_id = 0

    def _delta_size(self) -> int:
        cfg = self.cfg
        while True:
            size = round(self.rng.gauss(cfg.delta_frame_mean, cfg.delta_frame_std))
            if cfg.delta_frame_min <= size <= cfg.delta_frame_max:
                return size

    def next(self) -> MediaFrame:
        cfg = self.cfg
        fid = self.frame_id
        self.frame_id += 1
        if fid % cfg.key_frame_interval == 0:
            kind, size = FrameKind.KEY, cfg.key_frame_size
        else:
            kind, size = FrameKind.DELTA, self._delta_size()
        header = struct.pack(">QB", fid, kind is FrameKind.KEY)
        header = (header + self.rng.randbytes(cfg.frame_header_len))[:cfg.frame_header_len]
        payload = self.rng.randbytes(size - cfg.frame_header_len)
        ts = round(fid * 1_000_000 / cfg.fps)
        return MediaFrame(fid, kind, header, payload, ts)


def frame_source_next(state: FrameSource) -> MediaFrame:
    return state.next()


def pack_record(kind: int, body: bytes) -> bytes:
    return _REC.pack(len(body) + 1, kind) + body


async def read_record(reader: asyncio.StreamReader) -> tuple[int, bytes] | None:
    try:
        head = await reader.readexactly(_REC.size)
    except asyncio.IncompleteReadError:
        return None
    length, kind = _REC.unpack(head)
    body = await reader.readexactly(length - 1)
    return kind, body


@dataclass
class MediaStats:
    frames_sent: int = 0
    frames_with_data: int = 0
    audio_sent: int = 0
    frames_received: int = 0


async def media_send_loop(queue: BlockQueue, cfg: ChannelConfig, sink, source: FrameSource,
                          stop: asyncio.Event, stats: MediaStats | None = None,
                          encoder: ReplaceEncoder | None = None) -> None:
    """Emit one frame every 1/fps seconds, carrying covert data per ``cfg.mode``.

    ``sink(kind, frame_bytes)`` writes a record to the transport. Cover frames
    go out whether or not data is queued. Audio runs as a separate fixed-rate
    stream that never carries data.
    """
    loop = asyncio.get_running_loop()
    epoch = loop.time()
    stats = stats if stats is not None else MediaStats()
    if cfg.mode is Mode.REPLACE and encoder is None:
        encoder = ReplaceEncoder(queue, seed=cfg.prng_seed ^ 0x5EED)
    audio_next = 0
    audio_rng = random.Random(cfg.prng_seed ^ 0xA0D10)
    while not stop.is_set():
        frame = source.next()
        due = epoch + frame.timestamp / 1e6
        # audio packets due before this frame
        while epoch + audio_next / AUDIO_RATE < due and not stop.is_set():
            await _sleep_until(loop, epoch + audio_next / AUDIO_RATE)
            sink(REC_AUDIO, audio_rng.randbytes(AUDIO_PACKET))
            audio_next += 1
            stats.audio_sent += 1
        await _sleep_until(loop, due)
        if stop.is_set():
            break
        if encoder is not None:
            busy = not encoder.idle
            out = encoder.encode(frame)
        else:
            block = queue.get_nowait()
            busy = block is not None
            out = encode_add(frame, block) if busy else frame
        stats.frames_sent += 1
        stats.frames_with_data += busy
        sink(REC_KEY if frame.kind is FrameKind.KEY else REC_DELTA, out.to_bytes())


async def _sleep_until(loop, when: float) -> None:
    delay = when - loop.time()
    if delay > 0:
        await asyncio.sleep(delay)


async def media_recv_loop(reader: asyncio.StreamReader, cfg: ChannelConfig, out,
                          codec_stats: CodecStats, stats: MediaStats | None = None) -> None:
    """Decode frames from ``reader`` and hand completed blocks to ``out(block)`` in order.

    Returns at end of stream or on a CLOSE record.
    """
    loop = asyncio.get_running_loop()
    stats = stats if stats is not None else MediaStats()
    reasm = Reassembler(clock=loop.time, stats=codec_stats)
    next_seq = 0
    held: dict[int, DataBlock] = {}
    hlen = cfg.frame_header_len
    frame_id = 0
    gap_since = None
    while True:
        rec = await read_record(reader)
        if rec is None or rec[0] == REC_CLOSE:
            return
        kind, body = rec
        if kind == REC_AUDIO:
            continue
        stats.frames_received += 1
        frame = MediaFrame(frame_id, FrameKind.KEY if kind == REC_KEY else FrameKind.DELTA,
                           body[:hlen], body[hlen:], 0)
        frame_id += 1
        frags, _ = decode_frame(frame, cfg.mode, (cfg.block_size,), codec_stats)
        for hdr, data in frags:
            block = reasm.offer(hdr, data)
            if block is None:
                continue
            if len(block.payload) < cfg.block_size:
                # sender elided trailing zero padding
                block = DataBlock(block.stream_id, block.block_seq,
                                  block.payload.ljust(cfg.block_size, b"\0"))
            held[block.block_seq] = block
        reasm.expire()
        if held and next_seq not in held:
            # a block was lost to corruption; give it the reassembly timeout
            gap_since = loop.time() if gap_since is None else gap_since
            if loop.time() - gap_since > reasm.timeout:
                codec_stats.abandoned_blocks += 1
                next_seq = min(held)
        while next_seq in held:
            gap_since = None
            out(held.pop(next_seq))
            next_seq += 1
