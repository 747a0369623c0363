"""SOCKS5 CONNECT subset: server-side negotiation and a small client."""

from __future__ import annotations

import asyncio
import enum
import ipaddress
import struct
from dataclasses import dataclass

VERSION = 5
CMD_CONNECT = 1
NO_AUTH = 0
NO_ACCEPTABLE = 0xFF
ATYP_IPV4, ATYP_DOMAIN, ATYP_IPV6 = 1, 3, 4


class Reply(enum.IntEnum):
    SUCCEEDED = 0
    GENERAL_FAILURE = 1
    NOT_ALLOWED = 2
    NETWORK_UNREACHABLE = 3
    HOST_UNREACHABLE = 4
    CONNECTION_REFUSED = 5
    TTL_EXPIRED = 6
    COMMAND_NOT_SUPPORTED = 7
    ADDRESS_TYPE_NOT_SUPPORTED = 8


class SocksError(Exception):
    def __init__(self, msg: str, reply: Reply = Reply.GENERAL_FAILURE):
        super().__init__(msg)
        self.reply = reply


# what a SOCKS4 client expects to read: VN=0, CD=91 (request rejected)
SOCKS4_REJECT = bytes([0, 91, 0, 0, 0, 0, 0, 0])


@dataclass(frozen=True)
class SocksRequest:
    host: str
    port: int
    version: int = VERSION
    command: int = CMD_CONNECT

    def pack(self) -> bytes:
        try:
            ip = ipaddress.ip_address(self.host)
        except ValueError:
            name = self.host.encode("ascii")
            addr = bytes([ATYP_DOMAIN, len(name)]) + name
        else:
            addr = bytes([ATYP_IPV4 if ip.version == 4 else ATYP_IPV6]) + ip.packed
        return bytes([self.version, self.command, 0]) + addr + struct.pack(">H", self.port)


def reply_bytes(code: Reply) -> bytes:
    return bytes([VERSION, code, 0, ATYP_IPV4]) + bytes(4) + bytes(2)


async def server_handshake(reader: asyncio.StreamReader, writer) -> SocksRequest:
    """Negotiate with a client and return its CONNECT request.

    On any protocol violation the matching error reply is written before
    :class:`SocksError` is raised; the caller closes the connection.
    """
    try:
        ver, nmethods = await reader.readexactly(2)
        if ver == 4:
            writer.write(SOCKS4_REJECT)
            raise SocksError("SOCKS version 4 is not supported")
        if ver != VERSION:
            writer.write(bytes([VERSION, NO_ACCEPTABLE]))
            raise SocksError(f"unknown SOCKS version {ver}")
        methods = await reader.readexactly(nmethods)
        if NO_AUTH not in methods:
            writer.write(bytes([VERSION, NO_ACCEPTABLE]))
            raise SocksError("client offers no usable auth method")
        writer.write(bytes([VERSION, NO_AUTH]))

        ver, cmd, _, atyp = await reader.readexactly(4)
        if ver != VERSION:
            writer.write(reply_bytes(Reply.GENERAL_FAILURE))
            raise SocksError(f"request carries version {ver}")
        if atyp == ATYP_IPV4:
            host = str(ipaddress.IPv4Address(await reader.readexactly(4)))
        elif atyp == ATYP_IPV6:
            host = str(ipaddress.IPv6Address(await reader.readexactly(16)))
        elif atyp == ATYP_DOMAIN:
            (n,) = await reader.readexactly(1)
            host = (await reader.readexactly(n)).decode("ascii", "replace")
        else:
            writer.write(reply_bytes(Reply.ADDRESS_TYPE_NOT_SUPPORTED))
            raise SocksError(f"address type {atyp}", Reply.ADDRESS_TYPE_NOT_SUPPORTED)
        (port,) = struct.unpack(">H", await reader.readexactly(2))
        if cmd != CMD_CONNECT:
            writer.write(reply_bytes(Reply.COMMAND_NOT_SUPPORTED))
            raise SocksError(f"command {cmd} not supported", Reply.COMMAND_NOT_SUPPORTED)
        return SocksRequest(host, port)
    except asyncio.IncompleteReadError:
        raise SocksError("client hung up during negotiation") from None


async def client_connect(reader: asyncio.StreamReader, writer, host: str, port: int) -> Reply:
    """Client side of CONNECT over an already open connection to the proxy."""
    writer.write(bytes([VERSION, 1, NO_AUTH]))
    ver, method = await reader.readexactly(2)
    if ver != VERSION or method != NO_AUTH:
        raise SocksError("proxy refused authentication method")
    writer.write(SocksRequest(host, port).pack())
    ver, rep, _, atyp = await reader.readexactly(4)
    if atyp == ATYP_IPV4:
        await reader.readexactly(4 + 2)
    elif atyp == ATYP_IPV6:
        await reader.readexactly(16 + 2)
    elif atyp == ATYP_DOMAIN:
        (n,) = await reader.readexactly(1)
        await reader.readexactly(n + 2)
    return Reply(rep)
