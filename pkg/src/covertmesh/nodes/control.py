"""Control messages multiplexed inside one covert channel.

Wire format: type (u8), stream_id (u32), body length (u32), body.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Union

_HEAD = struct.Struct(">BII")
HEADER_LEN = _HEAD.size
MAX_BODY = 1 << 20


class ControlError(ValueError):
    pass


class MsgType(enum.IntEnum):
    OPEN_STREAM = 1
    STREAM_DATA = 2
    STREAM_CLOSE = 3
    KEEPALIVE = 4
    # acknowledges OPEN_STREAM once the far end is connected
    STREAM_OPENED = 5


class CloseReason(enum.IntEnum):
    NORMAL = 0
    NO_ROUTE = 1
    REFUSED = 2
    CHANNEL_LOST = 3
    PROTOCOL = 4
    GAP = 5
    UNREACHABLE = 6


@dataclass(frozen=True)
class NextHop:
    node_id: int


@dataclass(frozen=True)
class Join:
    """Marks the rendezvous: this sub-stream is path ``path_id`` of ``k`` in ``circuit_id``."""
    circuit_id: int
    path_id: int
    k: int


@dataclass(frozen=True)
class Exit:
    host: str
    port: int


RouteItem = Union[NextHop, Join, Exit]
_NEXT, _JOIN, _EXIT = 1, 2, 3


def encode_route(route: list[RouteItem]) -> bytes:
    out = bytearray()
    for item in route:
        if isinstance(item, NextHop):
            out += struct.pack(">BI", _NEXT, item.node_id)
        elif isinstance(item, Join):
            out += struct.pack(">BIHH", _JOIN, item.circuit_id, item.path_id, item.k)
        elif isinstance(item, Exit):
            host = item.host.encode("idna" if not item.host.isascii() else "ascii")
            if len(host) > 255:
                raise ControlError("exit host name too long")
            out += struct.pack(">BHB", _EXIT, item.port, len(host)) + host
        else:
            raise ControlError(f"not a route item: {item!r}")
    return bytes(out)


def decode_route(body: bytes) -> list[RouteItem]:
    route: list[RouteItem] = []
    i = 0
    try:
        while i < len(body):
            tag = body[i]
            if tag == _NEXT:
                (node,) = struct.unpack_from(">I", body, i + 1)
                route.append(NextHop(node))
                i += 5
            elif tag == _JOIN:
                circuit, path, k = struct.unpack_from(">IHH", body, i + 1)
                route.append(Join(circuit, path, k))
                i += 9
            elif tag == _EXIT:
                port, n = struct.unpack_from(">HB", body, i + 1)
                host = body[i + 4:i + 4 + n]
                if len(host) != n:
                    raise ControlError("truncated exit host")
                route.append(Exit(host.decode("ascii"), port))
                i += 4 + n
            else:
                raise ControlError(f"unknown route item tag {tag}")
    except struct.error:
        raise ControlError("truncated route") from None
    if not route:
        raise ControlError("empty route")
    return route


@dataclass(frozen=True)
class ControlMessage:
    type: MsgType
    stream_id: int
    body: bytes = b""

    def pack(self) -> bytes:
        return _HEAD.pack(self.type, self.stream_id, len(self.body)) + self.body

    @classmethod
    def open(cls, stream_id: int, route: list[RouteItem]) -> "ControlMessage":
        return cls(MsgType.OPEN_STREAM, stream_id, encode_route(route))

    @classmethod
    def close(cls, stream_id: int, reason: CloseReason = CloseReason.NORMAL) -> "ControlMessage":
        return cls(MsgType.STREAM_CLOSE, stream_id, bytes([reason]))

    @property
    def route(self) -> list[RouteItem]:
        return decode_route(self.body)

    @property
    def reason(self) -> CloseReason:
        return CloseReason(self.body[0]) if self.body else CloseReason.NORMAL


class ControlDecoder:
    """Incremental parser: feed channel bytes, get whole messages back."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[ControlMessage]:
        self._buf += data
        out = []
        while len(self._buf) >= HEADER_LEN:
            mtype, sid, n = _HEAD.unpack_from(self._buf)
            if n > MAX_BODY:
                raise ControlError(f"control body of {n} bytes")
            if len(self._buf) < HEADER_LEN + n:
                break
            try:
                mtype = MsgType(mtype)
            except ValueError:
                raise ControlError(f"unknown control type {mtype}") from None
            out.append(ControlMessage(mtype, sid, bytes(self._buf[HEADER_LEN:HEADER_LEN + n])))
            del self._buf[:HEADER_LEN + n]
        return out
