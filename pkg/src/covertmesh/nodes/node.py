"""Gateway, proxy and bridge runtimes.

Every node speaks the same control protocol over its covert channels. A
stream is a chain of *legs* spliced pairwise: bytes written into one leg come
out of its partner. Legs exist for plain sockets, for one stream inside a
covert channel, and for a multipath circuit that spreads a stream over K
channel streams.
"""

from __future__ import annotations

import asyncio
import dataclasses
import itertools
import logging
import random
from collections import Counter
from typing import Optional

from ..channels import Channel, ChannelConfig, Role, SignalingError, establish_channel
from ..channels.tunnel import AuthFailure
from ..multipath import (BufferOverflow, GapTimeout, Joiner, MultipathCircuit, PathSpec, Policy,
                         Splitter)
from . import socks
from .config import NodeConfig, NodeRole
from .control import (HEADER_LEN, CloseReason, ControlDecoder, ControlError, ControlMessage, Exit,
                      Join, MsgType, NextHop, RouteItem, decode_route)

log = logging.getLogger(__name__)

SOCKET_READ = 64 * 1024
OPEN_TIMEOUT = 30.0
CIRCUIT_TIMEOUT = 10.0
_SEQ_LEN = 4

_SOCKS_REPLY = {
    CloseReason.NO_ROUTE: socks.Reply.NETWORK_UNREACHABLE,
    CloseReason.REFUSED: socks.Reply.CONNECTION_REFUSED,
    CloseReason.UNREACHABLE: socks.Reply.HOST_UNREACHABLE,
}


class RealNet:
    """The host network, behind the same two calls the emulator's hosts offer."""

    async def start_server(self, cb, port: int, host: Optional[str] = None):
        return await asyncio.start_server(cb, host, port)

    async def open_connection(self, host: str, port: int):
        return await asyncio.open_connection(host, port)


def splice(a: "Leg", b: "Leg") -> None:
    a.peer, b.peer = b, a
    a.attached()
    b.attached()


class Leg:
    peer: Optional["Leg"] = None

    def __init__(self):
        self.done = False

    def attached(self) -> None:
        pass

    async def write(self, data: bytes) -> None:
        raise NotImplementedError

    async def finish(self, reason: CloseReason) -> None:
        """The partner has closed with ``reason``; close this side too."""
        raise NotImplementedError

    async def opened(self) -> None:
        """The far end of the partner is connected."""

    async def _local_close(self, reason: CloseReason) -> None:
        # this side ended on its own; tell the partner
        if not self.done:
            self.done = True
            if self.peer is not None:
                await self.peer.finish(reason)


class SocketLeg(Leg):
    def __init__(self, reader: asyncio.StreamReader, writer):
        super().__init__()
        self.reader = reader
        self.writer = writer
        self._pump: Optional[asyncio.Task] = None

    def start(self) -> None:
        if self._pump is None:
            self._pump = asyncio.ensure_future(self._run())

    async def _run(self) -> None:
        try:
            while not self.done:
                data = await self.reader.read(SOCKET_READ)
                if not data:
                    break
                await self.peer.write(data)
        except (ConnectionError, OSError):
            pass
        await self._local_close(CloseReason.NORMAL)
        self._close_writer()

    async def write(self, data: bytes) -> None:
        if self.done:
            return
        try:
            self.writer.write(data)
            await self.writer.drain()
        except (ConnectionError, OSError):
            await self._local_close(CloseReason.NORMAL)

    async def finish(self, reason: CloseReason) -> None:
        if not self.done:
            self.done = True
            self._close_writer()

    def _close_writer(self) -> None:
        try:
            self.writer.close()
        except Exception:
            pass


class ClientLeg(SocketLeg):
    """Application side at the gateway: reads only start once the far end is open."""

    def __init__(self, reader, writer, socks_reply: bool):
        super().__init__(reader, writer)
        self.socks_reply = socks_reply
        self.is_open = asyncio.get_running_loop().create_future()

    async def opened(self) -> None:
        if self.done or self.is_open.done():
            return
        if self.socks_reply:
            self.writer.write(socks.reply_bytes(socks.Reply.SUCCEEDED))
        self.is_open.set_result(True)
        self.start()

    async def finish(self, reason: CloseReason) -> None:
        if not self.is_open.done():
            if self.socks_reply:
                self.writer.write(socks.reply_bytes(_SOCKS_REPLY.get(reason, socks.Reply.GENERAL_FAILURE)))
            self.is_open.set_result(False)
        await super().finish(reason)


class ChannelLeg(Leg):
    """One stream multiplexed inside a :class:`PeerLink`."""

    def __init__(self, link: "PeerLink", stream_id: int):
        super().__init__()
        self.link = link
        self.stream_id = stream_id
        self.inbox: asyncio.Queue[ControlMessage] = asyncio.Queue()
        self._pump: Optional[asyncio.Task] = None

    @property
    def max_write(self) -> int:
        return self.link.max_data

    def attached(self) -> None:
        if self._pump is None:
            self._pump = asyncio.ensure_future(self._run())

    async def _run(self) -> None:
        while True:
            msg = await self.inbox.get()
            if msg.type is MsgType.STREAM_DATA:
                if not self.done:
                    await self.peer.write(msg.body)
            elif msg.type is MsgType.STREAM_OPENED:
                await self.peer.opened()
            elif msg.type is MsgType.STREAM_CLOSE:
                self.link.forget(self.stream_id)
                await self._local_close(msg.reason)
                return

    async def write(self, data: bytes) -> None:
        step = self.max_write
        for i in range(0, len(data), step):
            if self.done:
                return
            try:
                await self.link.send(ControlMessage(MsgType.STREAM_DATA, self.stream_id, data[i:i + step]))
            except ConnectionError:
                return

    async def finish(self, reason: CloseReason) -> None:
        if self.done:
            return
        self.done = True
        self.link.forget(self.stream_id)
        try:
            await self.link.send(ControlMessage.close(self.stream_id, reason))
        except ConnectionError:
            pass
        if self._pump is not None and self._pump is not asyncio.current_task():
            self._pump.cancel()

    async def opened(self) -> None:
        if not self.done:
            try:
                await self.link.send(ControlMessage(MsgType.STREAM_OPENED, self.stream_id))
            except ConnectionError:
                pass


class _SubLeg(Leg):
    """Partner of one path's ChannelLeg; routes its events into the multipath leg."""

    def __init__(self, owner: "MultipathLeg", path_id: int):
        super().__init__()
        self.owner = owner
        self.path_id = path_id

    async def write(self, data: bytes) -> None:
        await self.owner._sub_data(self.path_id, data)

    async def finish(self, reason: CloseReason) -> None:
        await self.owner._sub_closed(self.path_id, reason)

    async def opened(self) -> None:
        await self.owner._sub_opened(self.path_id)


class MultipathLeg(Leg):
    """A stream striped over K channel streams, one per path.

    Each chunk is prefixed with a 4-byte sequence number; a chunk with no data
    marks end of stream. Both directions are split and joined.
    """

    def __init__(self, circuit: MultipathCircuit, subs: dict[int, ChannelLeg],
                 gap_timeout: float = 10.0, max_buffer: int = 256):
        super().__init__()
        loop = asyncio.get_running_loop()
        self.circuit = circuit
        self.subs = subs
        self.splitter = Splitter(circuit)
        self.joiner = Joiner(max_buffer, gap_timeout, clock=loop.time)
        self.tx_seq = 0
        self.path_blocks = Counter()
        self._open_paths: set[int] = set()
        self._rx_lock = asyncio.Lock()
        self._watch: Optional[asyncio.Task] = None
        for pid, leg in subs.items():
            sub = _SubLeg(self, pid)
            sub.peer, leg.peer = leg, sub

    @property
    def max_write(self) -> int:
        return min(leg.max_write for leg in self.subs.values()) - _SEQ_LEN

    def attached(self) -> None:
        # path pumps start only now, so nothing arrives before our partner exists
        for leg in self.subs.values():
            leg.attached()
        if self._watch is None:
            self._watch = asyncio.ensure_future(self._watch_gaps())

    async def _watch_gaps(self) -> None:
        while not self.done:
            await asyncio.sleep(1.0)
            try:
                self.joiner.check()
            except GapTimeout as e:
                log.warning("circuit %x: %s", self.circuit.circuit_id, e)
                await self._abort(CloseReason.GAP)

    async def _send_chunk(self, chunk: bytes) -> None:
        while True:
            seq = self.tx_seq
            try:
                pid = self.splitter.assign(seq)
            except Exception:
                await self._abort(CloseReason.CHANNEL_LOST)
                return
            leg = self.subs[pid]
            if leg.done:
                self.splitter.mark_dead(pid)
                continue
            self.tx_seq += 1
            self.path_blocks[pid] += 1
            await leg.write(seq.to_bytes(_SEQ_LEN, "big") + chunk)
            return

    async def write(self, data: bytes) -> None:
        step = self.max_write
        for i in range(0, len(data), step):
            if self.done:
                return
            await self._send_chunk(data[i:i + step])

    async def finish(self, reason: CloseReason) -> None:
        if self.done:
            return
        if reason is CloseReason.NORMAL:
            await self._send_chunk(b"")
        self.done = True
        for leg in self.subs.values():
            await leg.finish(reason)
        self._stop_watch()

    async def opened(self) -> None:
        for leg in self.subs.values():
            await leg.opened()

    async def _abort(self, reason: CloseReason) -> None:
        if self.done:
            return
        self.done = True
        self._stop_watch()
        for leg in self.subs.values():
            await leg.finish(reason)
        if self.peer is not None:
            await self.peer.finish(reason)

    def _stop_watch(self) -> None:
        if self._watch is not None and self._watch is not asyncio.current_task():
            self._watch.cancel()

    async def _sub_data(self, pid: int, data: bytes) -> None:
        if len(data) < _SEQ_LEN:
            return
        seq = int.from_bytes(data[:_SEQ_LEN], "big")
        async with self._rx_lock:
            if self.done:
                return
            try:
                items = self.joiner.push(seq, data[_SEQ_LEN:])
            except (GapTimeout, BufferOverflow) as e:
                log.warning("circuit %x: %s", self.circuit.circuit_id, e)
                await self._abort(CloseReason.GAP)
                return
            for chunk in items:
                if not chunk:
                    await self._local_close(CloseReason.NORMAL)
                    for leg in self.subs.values():
                        await leg.finish(CloseReason.NORMAL)
                    self._stop_watch()
                    return
                await self.peer.write(chunk)

    async def _sub_closed(self, pid: int, reason: CloseReason) -> None:
        if self.done:
            return
        if reason is not CloseReason.NORMAL:
            self.splitter.mark_dead(pid)
        if all(leg.done for leg in self.subs.values()):
            # every path is gone without an end marker
            await self._abort(CloseReason.CHANNEL_LOST if reason is CloseReason.NORMAL else reason)
        elif pid not in self._open_paths and reason is not CloseReason.NORMAL:
            # a path failed before the circuit came up
            await self._abort(reason)

    async def _sub_opened(self, pid: int) -> None:
        self._open_paths.add(pid)
        if len(self._open_paths) == len(self.subs):
            await self.peer.opened()


class PeerLink:
    """A covert channel to one peer carrying many streams."""

    def __init__(self, node: "Node", channel: Channel, initiator: bool, peer_id: Optional[int] = None):
        self.node = node
        self.channel = channel
        self.peer_id = peer_id
        self.streams: dict[int, ChannelLeg] = {}
        self._ids = itertools.count(1 if initiator else 2, 2)
        self._lock = asyncio.Lock()
        self._decoder = ControlDecoder()
        loop = asyncio.get_running_loop()
        self.last_rx = self.last_tx = loop.time()
        self.dead = False
        self.keepalives_enabled = True
        self.keepalives_sent = 0
        self.keepalives_received = 0
        self._tasks: list[asyncio.Task] = []

    @property
    def max_data(self) -> int:
        return self.channel.max_chunk - HEADER_LEN

    def start(self) -> None:
        self._tasks = [asyncio.ensure_future(self._read()), asyncio.ensure_future(self._keepalive())]

    async def send(self, msg: ControlMessage) -> None:
        if self.dead:
            raise ConnectionError("link is down")
        async with self._lock:
            if self.dead:
                raise ConnectionError("link is down")
            await self.channel.send(msg.pack())
            self.last_tx = asyncio.get_running_loop().time()

    def open_stream(self, route: list[RouteItem]) -> tuple[ChannelLeg, ControlMessage]:
        sid = next(self._ids)
        leg = ChannelLeg(self, sid)
        self.streams[sid] = leg
        return leg, ControlMessage.open(sid, route)

    def forget(self, sid: int) -> None:
        self.streams.pop(sid, None)

    async def _read(self) -> None:
        try:
            while True:
                data = await self.channel.recv()
                if not data:
                    break
                self.last_rx = asyncio.get_running_loop().time()
                for msg in self._decoder.feed(data):
                    self._dispatch(msg)
        except ControlError as e:
            log.warning("protocol error from peer %s: %s", self.peer_id, e)
        self._teardown()

    def _dispatch(self, msg: ControlMessage) -> None:
        if msg.type is MsgType.KEEPALIVE:
            self.keepalives_received += 1
            return
        if msg.type is MsgType.OPEN_STREAM:
            if msg.stream_id in self.streams:
                asyncio.ensure_future(self._refuse(msg.stream_id, CloseReason.PROTOCOL))
                return
            leg = ChannelLeg(self, msg.stream_id)
            self.streams[msg.stream_id] = leg
            asyncio.ensure_future(self.node.handle_open(leg, msg.body))
            return
        leg = self.streams.get(msg.stream_id)
        if leg is not None:
            leg.inbox.put_nowait(msg)

    async def _refuse(self, sid: int, reason: CloseReason) -> None:
        try:
            await self.send(ControlMessage.close(sid, reason))
        except ConnectionError:
            pass

    async def _keepalive(self) -> None:
        loop = asyncio.get_running_loop()
        every, dead_after = self.node.cfg.keepalive, self.node.cfg.dead_after
        while not self.dead:
            now = loop.time()
            if now - self.last_rx >= dead_after:
                log.warning("peer %s silent for %.0f s; dropping channel", self.peer_id, now - self.last_rx)
                self.channel.abort(TimeoutError("peer silent"))
                self._teardown()
                return
            if self.keepalives_enabled and now - self.last_tx >= every:
                try:
                    await self.send(ControlMessage(MsgType.KEEPALIVE, 0))
                    self.keepalives_sent += 1
                except ConnectionError:
                    return
                now = loop.time()
            wake = min(self.last_tx + every if self.keepalives_enabled else float("inf"),
                       self.last_rx + dead_after)
            await asyncio.sleep(max(wake - now, 1e-3))

    def _teardown(self) -> None:
        if self.dead:
            return
        self.dead = True
        for sid, leg in list(self.streams.items()):
            leg.inbox.put_nowait(ControlMessage.close(sid, CloseReason.CHANNEL_LOST))
            if leg.peer is None:
                # not spliced yet; nothing will drain the inbox
                leg.done = True
        self.streams.clear()
        self.node._link_lost(self)
        for t in self._tasks:
            if t is not asyncio.current_task():
                t.cancel()

    async def close(self) -> None:
        await self.channel.close()
        self._teardown()


def _carrier_of(leg: Leg) -> Optional[ChannelConfig]:
    if isinstance(leg, ChannelLeg):
        return leg.link.channel.cfg
    if isinstance(leg, MultipathLeg):
        return _carrier_of(next(iter(leg.subs.values())))
    return None


class _Rendezvous:
    def __init__(self, circuit_id: int, k: int, rest: list[RouteItem]):
        self.circuit_id = circuit_id
        self.k = k
        self.rest = rest
        self.legs: dict[int, ChannelLeg] = {}
        self.timer: Optional[asyncio.TimerHandle] = None


class Node:
    """Proxy/bridge runtime; the gateway adds a client front end on top."""

    def __init__(self, cfg: NodeConfig, net=None):
        self.cfg = cfg
        self.net = net if net is not None else RealNet()
        self.id = cfg.identity.node_id
        self.rng = random.Random(cfg.seed) if cfg.seed is not None else random.SystemRandom()
        self.links: dict[int, asyncio.Future] = {}
        self.inbound: list[PeerLink] = []
        self.circuits: dict[int, _Rendezvous] = {}
        self.closes = Counter()
        self.streams_opened = 0
        self._servers: list = []

    @property
    def role(self) -> NodeRole:
        return self.cfg.identity.role

    async def start(self) -> None:
        ident = self.cfg.identity
        self._servers.append(await self.net.start_server(self._accept_channel, ident.port, ident.host))

    async def stop(self) -> None:
        for s in self._servers:
            s.close()
        self._servers.clear()
        links = [f.result() for f in self.links.values() if f.done() and not f.exception()]
        for link in links + self.inbound:
            link.channel.abort()
            link._teardown()

    # channels

    def _session_id(self) -> int:
        return self.rng.getrandbits(64)

    async def _accept_channel(self, reader, writer) -> None:
        ident = self.cfg.identity
        try:
            ch = await establish_channel(Role.RECEIVER, self.cfg.channel, reader, writer,
                                         supported=ident.carriers)
        except (SignalingError, AuthFailure, ConnectionError, asyncio.IncompleteReadError) as e:
            log.info("node %d: inbound channel failed: %s", self.id, e)
            writer.close()
            return
        link = PeerLink(self, ch, initiator=False)
        self.inbound.append(link)
        link.start()

    async def link_to(self, peer: int, like: Optional[ChannelConfig] = None) -> PeerLink:
        """The channel to ``peer`` for these carrier parameters, opened on first use."""
        cfg = self.cfg.channel_for(peer, like)
        key = (peer,) + tuple(sorted(cfg.negotiated().items()))
        fut = self.links.get(key)
        if fut is None or (fut.done() and (fut.cancelled() or fut.exception() is not None
                                           or fut.result().dead)):
            fut = asyncio.ensure_future(self._connect(peer, cfg))
            fut.add_done_callback(lambda f: f.cancelled() or f.exception())
            self.links[key] = fut
        return await asyncio.shield(fut)

    async def _connect(self, peer: int, cfg: ChannelConfig) -> PeerLink:
        ident = self.cfg.deployment[peer]
        reader, writer = await self.net.open_connection(ident.host, ident.port)
        sid = self._session_id()
        cfg = dataclasses.replace(cfg, prng_seed=(cfg.prng_seed ^ sid) & 0xFFFFFFFF)
        try:
            ch = await establish_channel(Role.INITIATOR, cfg, reader, writer, session_id=sid)
        except BaseException:
            writer.close()
            raise
        link = PeerLink(self, ch, initiator=True, peer_id=peer)
        link.start()
        return link

    def _link_lost(self, link: PeerLink) -> None:
        if link in self.inbound:
            self.inbound.remove(link)

    async def _open_via(self, peer: int, route: list[RouteItem],
                        like: Optional[ChannelConfig] = None) -> ChannelLeg:
        link = await self.link_to(peer, like)
        leg, msg = link.open_stream(route)
        await link.send(msg)
        return leg

    # streams

    async def handle_open(self, leg: Leg, route: list[RouteItem] | bytes) -> None:
        """Serve an inbound OPEN_STREAM whose remaining route is ``route``."""
        if isinstance(route, bytes):
            try:
                route = decode_route(route)
            except ControlError:
                await self._reject(leg, CloseReason.PROTOCOL)
                return
        if not route:
            await self._reject(leg, CloseReason.PROTOCOL)
            return
        item, rest = route[0], list(route[1:])
        if isinstance(item, NextHop):
            await self._relay(leg, item.node_id, rest)
        elif isinstance(item, Join):
            if not isinstance(leg, ChannelLeg):
                await self._reject(leg, CloseReason.PROTOCOL)
                return
            self._join(leg, item, rest)
        elif isinstance(item, Exit):
            await self._exit(leg, item)

    async def _reject(self, leg: Leg, reason: CloseReason) -> None:
        self.closes[reason] += 1
        await leg.finish(reason)

    async def _relay(self, leg: Leg, peer: int, rest: list[RouteItem]) -> None:
        if peer not in self.cfg.deployment or peer == self.id or not rest:
            await self._reject(leg, CloseReason.NO_ROUTE)
            return
        try:
            out = await self._open_via(peer, rest, _carrier_of(leg))
        except (OSError, SignalingError, AuthFailure, asyncio.IncompleteReadError, asyncio.TimeoutError):
            await self._reject(leg, CloseReason.UNREACHABLE)
            return
        self.streams_opened += 1
        splice(leg, out)

    async def _exit(self, leg: Leg, item: Exit) -> None:
        bridge = self.cfg.bridge
        if bridge is not None and bridge != self.id:
            await self._relay(leg, bridge, [item])
            return
        target = self.cfg.upstream or (item.host, item.port)
        try:
            reader, writer = await self.net.open_connection(*target)
        except ConnectionRefusedError:
            await self._reject(leg, CloseReason.REFUSED)
            return
        except (OSError, KeyError):
            await self._reject(leg, CloseReason.UNREACHABLE)
            return
        self.streams_opened += 1
        sock = SocketLeg(reader, writer)
        splice(leg, sock)
        await leg.opened()
        sock.start()

    def _join(self, leg: ChannelLeg, item: Join, rest: list[RouteItem]) -> None:
        rv = self.circuits.get(item.circuit_id)
        if rv is None:
            rv = self.circuits[item.circuit_id] = _Rendezvous(item.circuit_id, item.k, rest)
            rv.timer = asyncio.get_running_loop().call_later(
                CIRCUIT_TIMEOUT, lambda: asyncio.ensure_future(self._circuit_expired(rv)))
        if item.path_id in rv.legs or item.k != rv.k:
            asyncio.ensure_future(self._reject(leg, CloseReason.PROTOCOL))
            return
        rv.legs[item.path_id] = leg
        if len(rv.legs) < rv.k:
            return
        rv.timer.cancel()
        del self.circuits[item.circuit_id]
        circuit = MultipathCircuit(item.circuit_id, [PathSpec(pid, (self.id,)) for pid in sorted(rv.legs)])
        mp = MultipathLeg(circuit, {pid: rv.legs[pid] for pid in sorted(rv.legs)})
        asyncio.ensure_future(self.handle_open(mp, rv.rest))

    async def _circuit_expired(self, rv: _Rendezvous) -> None:
        if self.circuits.get(rv.circuit_id) is rv:
            del self.circuits[rv.circuit_id]
            for leg in rv.legs.values():
                await self._reject(leg, CloseReason.NO_ROUTE)


class Gateway(Node):
    """User-side node: SOCKS5 front end plus optional fixed-destination listeners."""

    def __init__(self, cfg: NodeConfig, paths: list[PathSpec], net=None,
                 policy: Policy = Policy.ROUND_ROBIN):
        super().__init__(cfg, net)
        if not paths:
            raise ValueError("gateway needs at least one path")
        MultipathCircuit(0, list(paths), policy)
        self.paths = list(paths)
        self.policy = Policy(policy)
        self.results = Counter()

    async def start(self) -> None:
        pass

    async def serve_socks(self, port: int, host: Optional[str] = None):
        server = await self.net.start_server(self._socks_client, port, host)
        self._servers.append(server)
        return server

    async def serve_forward(self, port: int, dest: tuple[str, int], host: Optional[str] = None):
        """Plain listener: every connection is carried to ``dest`` without a SOCKS exchange."""
        async def cb(reader, writer):
            await self._carry(ClientLeg(reader, writer, socks_reply=False), dest)
        server = await self.net.start_server(cb, port, host)
        self._servers.append(server)
        return server

    async def _socks_client(self, reader, writer) -> None:
        try:
            req = await socks.server_handshake(reader, writer)
        except socks.SocksError as e:
            log.info("socks client rejected: %s", e)
            self.results["socks_error"] += 1
            writer.close()
            return
        await self._carry(ClientLeg(reader, writer, socks_reply=True), (req.host, req.port))

    async def _carry(self, client: ClientLeg, dest: tuple[str, int]) -> None:
        exit_item = Exit(*dest)
        try:
            if len(self.paths) == 1:
                hops = self.paths[0].hops
                remote: Leg = await self._open_via(hops[0], [NextHop(h) for h in hops[1:]] + [exit_item])
            else:
                remote = await self._open_circuit(exit_item)
        except (OSError, SignalingError, AuthFailure, asyncio.IncompleteReadError,
                asyncio.TimeoutError, KeyError) as e:
            log.info("no path for %s:%d: %s", dest[0], dest[1], e)
            self.results["unreachable"] += 1
            await client.finish(CloseReason.UNREACHABLE)
            return
        splice(client, remote)
        try:
            ok = await asyncio.wait_for(asyncio.shield(client.is_open), OPEN_TIMEOUT)
        except asyncio.TimeoutError:
            ok = False
            await client.finish(CloseReason.UNREACHABLE)
            await remote.finish(CloseReason.UNREACHABLE)
        self.results["opened" if ok else "failed"] += 1

    async def _open_circuit(self, exit_item: Exit) -> MultipathLeg:
        cid = self.rng.getrandbits(32)
        circuit = MultipathCircuit(cid, self.paths, self.policy)
        subs: dict[int, ChannelLeg] = {}
        try:
            for p in self.paths:
                route = [NextHop(h) for h in p.hops[1:]] + [Join(cid, p.path_id, circuit.k), exit_item]
                subs[p.path_id] = await self._open_via(p.hops[0], route)
        except BaseException:
            for leg in subs.values():
                await leg.finish(CloseReason.UNREACHABLE)
            raise
        return MultipathLeg(circuit, subs)
