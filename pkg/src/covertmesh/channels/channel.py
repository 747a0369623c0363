"""Full-duplex covert channels over a connected byte stream."""

from __future__ import annotations

import asyncio
import logging
import secrets
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from ..codec import (CodecStats, DataBlock, FragmentHeader, Mode, ReplaceEncoder,
                     decode_fragment, encode_fragment)
from . import signaling
from .config import Carrier, ChannelConfig, Role
from .media import REC_CLOSE, FrameSource, MediaStats, media_recv_loop, media_send_loop, pack_record
from .tunnel import AuthFailure, RecordOpener, RecordSealer, derive_key, read_record

log = logging.getLogger(__name__)

_LEN = struct.Struct(">H")


class BlockPacker:
    """Cuts application writes into fixed-size blocks: 2-byte used length, data, zero pad."""

    def __init__(self, block_size: int, stream_id: int = 0):
        self.block_size = block_size
        self.stream_id = stream_id
        self.next_seq = 0

    @property
    def room(self) -> int:
        return self.block_size - _LEN.size

    def pack(self, data: bytes) -> list[DataBlock]:
        out = []
        for i in range(0, len(data), self.room):
            chunk = data[i:i + self.room]
            payload = _LEN.pack(len(chunk)) + chunk + bytes(self.room - len(chunk))
            out.append(DataBlock(self.stream_id, self.next_seq, payload))
            self.next_seq = (self.next_seq + 1) & 0xFFFFFFFF
        return out


class PendingBytes:
    """Application bytes waiting for the media carrier.

    Blocks are cut only when a frame asks for one, so small writes that arrive
    between frames share a block instead of each occupying its own. Exposes
    the ``get_nowait``/``len`` surface the frame encoders consume.
    """

    def __init__(self, packer: BlockPacker, capacity_blocks: int = 1024):
        self.packer = packer
        self.limit = capacity_blocks * packer.room
        self._buf = bytearray()
        self._waiters: deque[asyncio.Future] = deque()

    def __len__(self) -> int:
        return -(-len(self._buf) // self.packer.room)

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)

    async def write(self, data: bytes) -> None:
        view = memoryview(data)
        while view:
            while len(self._buf) >= self.limit:
                fut = asyncio.get_running_loop().create_future()
                self._waiters.append(fut)
                await fut
            take = self.limit - len(self._buf)
            self._buf += view[:take]
            view = view[take:]

    def get_nowait(self) -> Optional[DataBlock]:
        if not self._buf:
            return None
        room = self.packer.room
        chunk = bytes(self._buf[:room])
        del self._buf[:room]
        while self._waiters:
            fut = self._waiters.popleft()
            if not fut.done():
                fut.set_result(None)
                break
        return self.packer.pack(chunk)[0]


def unpack_block(block: DataBlock) -> bytes:
    (used,) = _LEN.unpack_from(block.payload)
    if used > len(block.payload) - _LEN.size:
        raise ValueError(f"block {block.block_seq} claims {used} bytes")
    return block.payload[_LEN.size:_LEN.size + used]


@dataclass
class ChannelStats:
    bytes_sent: int = 0
    bytes_received: int = 0
    blocks_sent: int = 0
    codec: CodecStats = field(default_factory=CodecStats)
    media: MediaStats = field(default_factory=MediaStats)


class Channel:
    """Common surface of both carriers: ``send``/``recv`` preserve the byte stream."""

    carrier: Carrier

    def __init__(self, cfg: ChannelConfig, role: Role, session_id: int, reader, writer):
        self.cfg = cfg
        self.role = role
        self.session_id = session_id
        self.reader = reader
        self.writer = writer
        self.stats = ChannelStats()
        self.error: Optional[BaseException] = None
        self.closed = asyncio.Event()
        self._inbox: asyncio.Queue[bytes] = asyncio.Queue()
        self._packer = BlockPacker(cfg.block_size)
        self._tasks: list[asyncio.Task] = []

    @property
    def max_chunk(self) -> int:
        """Largest write that fits in a single block."""
        return self._packer.room

    def _deliver(self, block: DataBlock) -> None:
        data = unpack_block(block)
        if data:
            self.stats.bytes_received += len(data)
            self._inbox.put_nowait(data)

    async def recv(self) -> bytes:
        """Next chunk of received application bytes; b"" once the channel is closed."""
        if self._inbox.empty() and self.closed.is_set():
            return b""
        data = await self._inbox.get()
        if not data:
            self._inbox.put_nowait(b"")
        return data

    def _finish(self, error: Optional[BaseException] = None) -> None:
        if self.closed.is_set():
            return
        if error is not None and self.error is None:
            self.error = error
        self.closed.set()
        self._inbox.put_nowait(b"")

    async def send(self, data: bytes) -> None:
        raise NotImplementedError

    async def close(self) -> None:
        raise NotImplementedError

    def abort(self, error: Optional[BaseException] = None) -> None:
        """Drop the channel at once without flushing."""
        self._transport_close()
        self._finish(error)

    def _transport_close(self) -> None:
        try:
            self.writer.close()
        except Exception:  # already gone
            pass


class TunnelChannel(Channel):
    carrier = Carrier.TUNNEL

    def __init__(self, cfg, role, session_id, reader, writer):
        super().__init__(cfg, role, session_id, reader, writer)
        mine, theirs = ("i2r", "r2i") if role is Role.INITIATOR else ("r2i", "i2r")
        self._sealer = RecordSealer(derive_key(cfg.psk, session_id, mine))
        self._opener = RecordOpener(derive_key(cfg.psk, session_id, theirs))

    async def authenticate(self, timeout: float = signaling.STEP_TIMEOUT) -> None:
        token = b"AUTH" + self.session_id.to_bytes(8, "big")
        self.writer.write(self._sealer.seal(token))
        try:
            record = await asyncio.wait_for(read_record(self.reader), timeout)
        except asyncio.TimeoutError:
            raise signaling.SignalingTimeout("no tunnel authentication record") from None
        if not record or self._opener.open(record) != token:
            raise AuthFailure("peer failed tunnel authentication")

    def start(self) -> None:
        self._tasks.append(asyncio.ensure_future(self._recv_loop()))

    async def send(self, data: bytes) -> None:
        if self.closed.is_set():
            raise ConnectionError("channel closed")
        for block in self._packer.pack(data):
            frag = encode_fragment(FragmentHeader(block.stream_id, block.block_seq, 0, 1, 0),
                                   block.payload)
            self.writer.write(self._sealer.seal(frag))
            self.stats.blocks_sent += 1
        self.stats.bytes_sent += len(data)
        await self.writer.drain()

    async def _recv_loop(self) -> None:
        try:
            while True:
                record = await read_record(self.reader)
                if not record:
                    break
                hdr, payload = decode_fragment(self._opener.open(record))
                self._deliver(DataBlock(hdr.stream_id, hdr.block_seq, payload))
        except AuthFailure as e:
            log.warning("tunnel %x torn down: %s", self.session_id, e)
            self._transport_close()
            self._finish(e)
            return
        except (ConnectionError, asyncio.IncompleteReadError) as e:
            self._finish(e)
            return
        self._finish()

    async def close(self) -> None:
        if not self.writer.is_closing():
            self.writer.write_eof() if self.writer.can_write_eof() else self.writer.close()
        self._finish()


class MediaChannel(Channel):
    carrier = Carrier.MEDIA

    def __init__(self, cfg, role, session_id, reader, writer, queue_capacity: int = 1024):
        super().__init__(cfg, role, session_id, reader, writer)
        self.queue = PendingBytes(self._packer, queue_capacity)
        self.source = FrameSource(cfg)
        self.encoder = (ReplaceEncoder(self.queue, seed=cfg.prng_seed ^ 0x5EED, elide_padding=True)
                        if cfg.mode is Mode.REPLACE else None)
        self._stop = asyncio.Event()
        self.frame_log: list[tuple[float, int]] = []

    def _sink(self, kind: int, body: bytes) -> None:
        if self.writer.is_closing():
            return
        if kind != 2:
            self.frame_log.append((asyncio.get_running_loop().time(), len(body)))
        self.writer.write(pack_record(kind, body))

    def start(self) -> None:
        self._tasks.append(asyncio.ensure_future(
            media_send_loop(self.queue, self.cfg, self._sink, self.source, self._stop,
                            self.stats.media, self.encoder)))
        self._tasks.append(asyncio.ensure_future(self._recv()))

    async def _recv(self) -> None:
        try:
            await media_recv_loop(self.reader, self.cfg, self._deliver, self.stats.codec, self.stats.media)
        except (ConnectionError, asyncio.IncompleteReadError) as e:
            self._stop.set()
            self._finish(e)
            return
        # peer closed: quiesce our direction too
        self._stop.set()
        self._finish()
        self._transport_close()

    async def send(self, data: bytes) -> None:
        if self.closed.is_set():
            raise ConnectionError("channel closed")
        await self.queue.write(data)
        self.stats.bytes_sent += len(data)

    def abort(self, error: Optional[BaseException] = None) -> None:
        self._stop.set()
        super().abort(error)

    async def flush(self) -> None:
        """Wait until every queued block has been put on the wire."""
        while not self._stop.is_set() and (
                len(self.queue) or (self.encoder is not None and not self.encoder.idle)):
            await asyncio.sleep(1 / self.cfg.fps)

    async def close(self) -> None:
        await self.flush()
        self._stop.set()
        if not self.writer.is_closing():
            self.writer.write(pack_record(REC_CLOSE, b""))
            self._transport_close()
        self._finish()


def receiver_policy(cfg: ChannelConfig, pinned: tuple[str, ...] = ()) -> Callable[[dict], dict]:
    """ANSWER builder: echo the offer except for parameters pinned by this peer."""
    mine = cfg.negotiated()

    def decide(offer: dict[str, str]) -> dict[str, str]:
        answer = dict(offer)
        for key in pinned:
            answer[key] = mine[key]
        return answer
    return decide


async def establish_channel(role: Role, cfg: ChannelConfig, reader, writer, *,
                            session_id: Optional[int] = None,
                            decide: Optional[Callable[[dict], dict]] = None,
                            supported: tuple[Carrier, ...] = (Carrier.MEDIA, Carrier.TUNNEL),
                            timeout: float = signaling.STEP_TIMEOUT) -> Channel:
    """Run signaling over ``reader``/``writer`` and return a started channel.

    The initiator offers ``cfg``; the receiver answers via ``decide`` (default:
    echo) and adopts the agreed parameters on top of its own ``cfg``.
    """
    role = Role(role)
    if role is Role.INITIATOR:
        sid = secrets.randbits(64) if session_id is None else session_id
        params = await signaling.initiate(reader, writer, sid, cfg.negotiated(), timeout)
        agreed = cfg
    else:
        policy = decide or receiver_policy(cfg)

        def gate(offer: dict[str, str]) -> dict[str, str]:
            answer = policy(offer)
            if answer.get("carrier") not in {c.value for c in supported}:
                answer["carrier"] = supported[0].value
            return answer
        sid, params = await signaling.respond(reader, writer, gate, timeout)
        agreed = cfg.with_params(params)

    if agreed.carrier is Carrier.TUNNEL:
        ch: Channel = TunnelChannel(agreed, role, sid, reader, writer)
        await ch.authenticate(timeout)
    else:
        ch = MediaChannel(agreed, role, sid, reader, writer)
    ch.start()
    return ch
