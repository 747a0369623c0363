"""Channel establishment messages: HELLO, OFFER, ANSWER, READY, CLOSE.

Wire form: 4-byte big-endian length of what follows, 1-byte type, then the
body as UTF-8 ``key=value`` lines (``\\n`` terminated). The session id travels
in the body under ``session_id`` as 16 hex digits.
"""

from __future__ import annotations

import asyncio
import enum
import struct
from dataclasses import dataclass, field

MAX_SIGNALING_MESSAGE = 64 * 1024
STEP_TIMEOUT = 5.0


class SignalingError(Exception):
    pass


class SignalingTimeout(SignalingError):
    pass


class ParameterMismatch(SignalingError):
    pass


class MsgType(enum.IntEnum):
    HELLO = 1
    OFFER = 2
    ANSWER = 3
    READY = 4
    CLOSE = 5


@dataclass
class SignalingMessage:
    type: MsgType
    session_id: int
    body: dict[str, str] = field(default_factory=dict)

    def pack(self) -> bytes:
        lines = [f"session_id={self.session_id:016x}"]
        for k, v in self.body.items():
            if "=" in k or "\n" in k or "\n" in str(v):
                raise SignalingError(f"unencodable body entry {k!r}")
            lines.append(f"{k}={v}")
        body = "".join(line + "\n" for line in lines).encode()
        return struct.pack(">IB", 1 + len(body), self.type) + body

    @classmethod
    def unpack(cls, data: bytes) -> "SignalingMessage":
        if len(data) < 5:
            raise SignalingError("truncated signaling message")
        (length,) = struct.unpack_from(">I", data)
        if length != len(data) - 4 or length < 1:
            raise SignalingError("signaling length mismatch")
        try:
            mtype = MsgType(data[4])
        except ValueError:
            raise SignalingError(f"unknown signaling type {data[4]}") from None
        body: dict[str, str] = {}
        for line in data[5:].decode().splitlines():
            key, sep, value = line.partition("=")
            if not sep:
                raise SignalingError(f"malformed body line {line!r}")
            body[key] = value
        try:
            session = int(body.pop("session_id"), 16)
        except (KeyError, ValueError):
            raise SignalingError("missing session_id") from None
        return cls(mtype, session, body)


async def read_message(reader: asyncio.StreamReader, timeout: float = STEP_TIMEOUT) -> SignalingMessage:
    try:
        head = await asyncio.wait_for(reader.readexactly(4), timeout)
        (length,) = struct.unpack(">I", head)
        if not 1 <= length <= MAX_SIGNALING_MESSAGE:
            raise SignalingError(f"bad signaling length {length}")
        rest = await asyncio.wait_for(reader.readexactly(length), timeout)
    except asyncio.TimeoutError:
        raise SignalingTimeout("no signaling message within timeout") from None
    except asyncio.IncompleteReadError:
        raise SignalingError("peer closed during signaling") from None
    return SignalingMessage.unpack(head + rest)


async def _expect(reader, mtype: MsgType, session_id: int | None, timeout: float) -> SignalingMessage:
    msg = await read_message(reader, timeout)
    if msg.type is MsgType.CLOSE:
        if msg.body.get("reason") == "mismatch":
            raise ParameterMismatch(f"peer aborted: {msg.body}")
        raise SignalingError(f"peer closed session: {msg.body}")
    if msg.type is not mtype:
        raise SignalingError(f"expected {mtype.name}, got {msg.type.name}")
    if session_id is not None and msg.session_id != session_id:
        raise SignalingError("session id changed mid-handshake")
    return msg


async def initiate(reader, writer, session_id: int, params: dict[str, str],
                   timeout: float = STEP_TIMEOUT) -> dict[str, str]:
    """Initiator side: HELLO+OFFER, await ANSWER, then READY. Returns agreed params."""
    writer.write(SignalingMessage(MsgType.HELLO, session_id, {"role": "INITIATOR"}).pack()
                 + SignalingMessage(MsgType.OFFER, session_id, dict(params)).pack())
    answer = await _expect(reader, MsgType.ANSWER, session_id, timeout)
    if answer.body != params:
        writer.write(SignalingMessage(MsgType.CLOSE, session_id, {"reason": "mismatch"}).pack())
        raise ParameterMismatch(f"offered {params}, answered {answer.body}")
    writer.write(SignalingMessage(MsgType.READY, session_id).pack())
    return params


async def respond(reader, writer, decide, timeout: float = STEP_TIMEOUT) -> tuple[int, dict[str, str]]:
    """Receiver side. ``decide(offer_params)`` returns the ANSWER params.

    Returns (session_id, params) once READY arrives.
    """
    hello = await _expect(reader, MsgType.HELLO, None, timeout)
    sid = hello.session_id
    offer = await _expect(reader, MsgType.OFFER, sid, timeout)
    answer = decide(dict(offer.body))
    writer.write(SignalingMessage(MsgType.ANSWER, sid, answer).pack())
    await _expect(reader, MsgType.READY, sid, timeout)
    if answer != offer.body:
        raise ParameterMismatch(f"offer {offer.body} does not match answer {answer}")
    return sid, answer
