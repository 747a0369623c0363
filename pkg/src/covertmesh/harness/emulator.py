"""Deterministic packet-level network emulation on a virtual clock.

Each link direction is a FIFO with a token-bucket rate limiter, fixed one-way
delay, uniform jitter and Bernoulli loss. Stream connections (the TCP stand-in)
are carried as MSS-sized packets over the shortest host route and surface as
ordinary ``asyncio`` reader/writer pairs. Loss applies to datagrams only;
stream packets model a reliable transport and are never dropped.
"""

from __future__ import annotations

import asyncio
import enum
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

MSS = 1448
WIRE_OVERHEAD = 52  # IP + TCP header bytes added to every stream packet


class EmulatorError(Exception):
    pass


class Direction(str, enum.Enum):
    OUT = "OUT"  # from the link's first endpoint to its second
    IN = "IN"


@dataclass
class LinkSpec:
    a: str
    b: str
    one_way_delay_ms: float = 0.0
    jitter_ms: float = 0.0
    bandwidth_kbps: float = 1_000_000.0
    loss_rate: float = 0.0
    burst_bytes: int = 2 * (MSS + WIRE_OVERHEAD)

    def validate(self) -> None:
        if self.a == self.b:
            raise EmulatorError(f"link {self.a}-{self.b} is a self loop")
        if self.one_way_delay_ms < 0 or self.jitter_ms < 0:
            raise EmulatorError("delay and jitter must be non-negative")
        if self.bandwidth_kbps <= 0:
            raise EmulatorError("bandwidth must be positive")
        if not 0 <= self.loss_rate < 1:
            raise EmulatorError("loss_rate must be in [0, 1)")


@dataclass(slots=True)
class Packet:
    flow: tuple
    size: int
    payload: bytes = b""
    kind: str = "data"
    reliable: bool = True


@dataclass(slots=True)
class TapRecord:
    flow: tuple
    timestamp_us: int
    size: int
    direction: Direction


class Tap:
    """Passive observation point on one link; records every departing packet."""

    def __init__(self, name: str = ""):
        self.name = name
        self.records: list[TapRecord] = []

    def observe(self, pkt: Packet, t: float, direction: Direction) -> None:
        self.records.append(TapRecord(pkt.flow, round(t * 1e6), pkt.size, direction))

    def flows(self) -> list[tuple]:
        return list(dict.fromkeys(r.flow for r in self.records))


class DelayTap(Tap):
    """Active tap: shifts departures of selected packets by ``delay_fn(t)`` seconds.

    ``delay_fn`` returns the extra delay for a packet offered at time ``t``;
    ``match`` restricts the perturbation to some flows/directions. Departure
    times stay non-decreasing so FIFO order is preserved.
    """

    def __init__(self, delay_fn: Callable[[float], float],
                 match: Callable[[Packet, Direction], bool] = lambda p, d: True, name: str = ""):
        super().__init__(name)
        self.delay_fn = delay_fn
        self.match = match

    def adjust(self, pkt: Packet, t: float, direction: Direction) -> float:
        if self.match(pkt, direction):
            return t + self.delay_fn(t)
        return t


class _LinkDirection:
    def __init__(self, link: "Link", direction: Direction, rng: random.Random):
        self.link = link
        self.direction = direction
        self.rng = rng
        spec = link.spec
        self.rate = spec.bandwidth_kbps * 1000 / 8  # bytes per second
        self.tokens = float(spec.burst_bytes)
        self.t_tokens = 0.0
        self.last_offer = 0.0
        self.last_depart = 0.0
        self.last_arrival = 0.0
        self.sent = self.delivered = self.dropped = 0
        # packets in flight, delivered strictly in order: timers with equal
        # deadlines are not FIFO in asyncio's heap
        self.in_flight: deque = deque()

    def transmit(self, pkt: Packet, now: float) -> Optional[float]:
        """Schedule ``pkt`` offered at ``now``; returns arrival time or None if lost."""
        spec = self.link.spec
        t = now
        for tap in self.link.active_taps:
            t = tap.adjust(pkt, t, self.direction)
        t = max(t, self.last_offer)
        self.last_offer = t
        depart = max(t, self.last_depart)
        tokens = min(spec.burst_bytes, self.tokens + self.rate * (depart - self.t_tokens))
        if tokens < pkt.size:
            depart += (pkt.size - tokens) / self.rate
            tokens = pkt.size
        self.tokens = tokens - pkt.size
        self.t_tokens = depart
        self.last_depart = depart
        self.sent += 1
        for tap in self.link.taps:
            tap.observe(pkt, depart, self.direction)
        if not pkt.reliable and spec.loss_rate and self.rng.random() < spec.loss_rate:
            self.dropped += 1
            return None
        arrival = depart + spec.one_way_delay_ms / 1000
        if spec.jitter_ms:
            arrival += self.rng.uniform(0, spec.jitter_ms) / 1000
        arrival = max(arrival, self.last_arrival)
        self.last_arrival = arrival
        return arrival


class Link:
    def __init__(self, spec: LinkSpec, seed: int):
        spec.validate()
        self.spec = spec
        self.taps: list[Tap] = []
        self.active_taps: list[DelayTap] = []
        self.dirs = {
            Direction.OUT: _LinkDirection(self, Direction.OUT, random.Random(f"{seed}:{spec.a}>{spec.b}")),
            Direction.IN: _LinkDirection(self, Direction.IN, random.Random(f"{seed}:{spec.b}>{spec.a}")),
        }

    def side(self, src: str) -> _LinkDirection:
        return self.dirs[Direction.OUT if src == self.spec.a else Direction.IN]

    def counters(self) -> dict:
        return {d.value: {"in": ld.sent, "out": ld.delivered, "dropped": ld.dropped}
                for d, ld in self.dirs.items()}


class VirtualNetwork:
    """Hosts, links and stream connections on the running (virtual-time) loop."""

    def __init__(self, seed: int = 0, loop: Optional[asyncio.AbstractEventLoop] = None):
        self.seed = seed
        self._loop = loop
        self.hosts: dict[str, Host] = {}
        self.links: dict[frozenset, Link] = {}
        self._adj: dict[str, list[str]] = {}
        self._routes: dict[tuple[str, str], list[_LinkDirection]] = {}
        self._next_conn = 0

    @property
    def loop(self) -> asyncio.AbstractEventLoop:
        if self._loop is None:
            self._loop = asyncio.get_running_loop()
        return self._loop

    def now(self) -> float:
        return self.loop.time()

    def add_host(self, name: str) -> "Host":
        if name not in self.hosts:
            self.hosts[name] = Host(self, name)
            self._adj[name] = []
        return self.hosts[name]

    def host(self, name: str) -> "Host":
        try:
            return self.hosts[name]
        except KeyError:
            raise EmulatorError(f"unknown host {name!r}") from None

    def add_link(self, spec: LinkSpec) -> Link:
        key = frozenset((spec.a, spec.b))
        if key in self.links:
            raise EmulatorError(f"duplicate link {spec.a}-{spec.b}")
        self.add_host(spec.a)
        self.add_host(spec.b)
        link = self.links[key] = Link(spec, self.seed)
        self._adj[spec.a] = sorted(self._adj[spec.a] + [spec.b])
        self._adj[spec.b] = sorted(self._adj[spec.b] + [spec.a])
        self._routes.clear()
        return link

    def link(self, a: str, b: str) -> Link:
        try:
            return self.links[frozenset((a, b))]
        except KeyError:
            raise EmulatorError(f"no link {a}-{b}") from None

    def tap(self, a: str, b: str, tap: Optional[Tap] = None) -> Tap:
        link = self.link(a, b)
        tap = tap if tap is not None else Tap(f"{a}-{b}")
        link.taps.append(tap)
        if isinstance(tap, DelayTap):
            link.active_taps.append(tap)
        return tap

    def route(self, src: str, dst: str) -> list[_LinkDirection]:
        """Shortest hop route (BFS, ties broken by host name)."""
        key = (src, dst)
        if key in self._routes:
            return self._routes[key]
        self.host(src), self.host(dst)
        prev = {src: None}
        todo = deque([src])
        while todo:
            h = todo.popleft()
            if h == dst:
                break
            for n in self._adj[h]:
                if n not in prev:
                    prev[n] = h
                    todo.append(n)
        if dst not in prev:
            raise EmulatorError(f"no route from {src} to {dst}")
        hops = []
        h = dst
        while prev[h] is not None:
            hops.append(self.link(prev[h], h).side(prev[h]))
            h = prev[h]
        self._routes[key] = hops[::-1]
        return self._routes[key]

    def path_delay(self, src: str, dst: str) -> float:
        """Sum of one-way link delays along the route, in seconds."""
        return sum(d.link.spec.one_way_delay_ms for d in self.route(src, dst)) / 1000

    def send(self, src: str, dst: str, pkt: Packet, on_arrival: Callable[[Packet], None]) -> None:
        route = self.route(src, dst)
        if not route:
            # loopback: deliver on the next loop iteration, in order
            self.loop.call_soon(on_arrival, pkt)
            return
        self._forward(pkt, route, 0, on_arrival)

    def send_datagram(self, src: str, dst: str, size: int,
                      on_arrival: Callable[[Packet], None], payload: bytes = b"") -> None:
        pkt = Packet(("dgram", src, dst), size, payload, "dgram", reliable=False)
        self.send(src, dst, pkt, on_arrival)

    def _forward(self, pkt: Packet, route, i: int, on_arrival) -> None:
        if i == len(route):
            on_arrival(pkt)
            return
        hop = route[i]
        arrival = hop.transmit(pkt, self.loop.time())
        if arrival is not None:
            hop.in_flight.append((pkt, route, i, on_arrival))
            self.loop.call_at(arrival, self._arrive, hop)

    def _arrive(self, hop) -> None:
        pkt, route, i, on_arrival = hop.in_flight.popleft()
        hop.delivered += 1
        self._forward(pkt, route, i + 1, on_arrival)

    def counters(self) -> dict:
        return {f"{l.spec.a}-{l.spec.b}": l.counters() for l in self.links.values()}

    def conn_id(self) -> int:
        self._next_conn += 1
        return self._next_conn


class Host:
    """One emulated machine; offers the stream API that node code is written against."""

    def __init__(self, net: VirtualNetwork, name: str):
        self.net = net
        self.name = name
        self._listeners: dict[int, Callable] = {}
        self._next_port = 40000

    def time(self) -> float:
        return self.net.now()

    def _ephemeral(self) -> int:
        self._next_port += 1
        return self._next_port

    async def start_server(self, client_connected_cb, port: int, host: Optional[str] = None,
                           **_) -> "EmuServer":
        if port in self._listeners:
            raise OSError(f"{self.name}:{port} already in use")
        self._listeners[port] = client_connected_cb
        return EmuServer(self, port)

    async def open_connection(self, host: str, port: int, limit: int = 2 ** 16, **_):
        net = self.net
        loop = net.loop
        dst = net.host(host)
        sport = self._ephemeral()
        flow = (net.conn_id(), self.name, sport, host, port)
        established = loop.create_future()

        def on_syn(pkt: Packet) -> None:
            cb = dst._listeners.get(port)
            if cb is None:
                net.send(host, self.name, Packet(flow, WIRE_OVERHEAD, kind="rst"),
                         lambda p: established.done() or established.set_exception(
                             ConnectionRefusedError(f"{host}:{port} refused")))
                return
            server_side = EmuTransport(net, flow, host, self.name, (host, port), (self.name, sport))
            reader = asyncio.StreamReader(limit=limit, loop=loop)
            proto = asyncio.StreamReaderProtocol(reader, cb, loop=loop)
            server_side.attach(proto)
            net.send(host, self.name, Packet(flow, WIRE_OVERHEAD, kind="synack"),
                     lambda p: established.done() or established.set_result(server_side))

        net.send(self.name, host, Packet(flow, WIRE_OVERHEAD, kind="syn"), on_syn)
        server_side = await established
        client_side = EmuTransport(net, flow, self.name, host, (self.name, sport), (host, port))
        client_side.peer, server_side.peer = server_side, client_side
        reader = asyncio.StreamReader(limit=limit, loop=loop)
        proto = asyncio.StreamReaderProtocol(reader, loop=loop)
        client_side.attach(proto)
        writer = asyncio.StreamWriter(client_side, proto, reader, loop)
        return reader, writer


class EmuServer:
    def __init__(self, host: Host, port: int):
        self.host = host
        self.port = port

    def close(self) -> None:
        self.host._listeners.pop(self.port, None)

    async def wait_closed(self) -> None:
        return None

    async def __aenter__(self):
        return self

    async def __aexit__(self, *exc):
        self.close()


class EmuTransport(asyncio.Transport):
    def __init__(self, net: VirtualNetwork, flow: tuple, src: str, dst: str,
                 sockname: tuple, peername: tuple):
        super().__init__()
        self.net = net
        self.flow = flow
        self.src = src
        self.dst = dst
        self.peer: Optional[EmuTransport] = None
        self._protocol = None
        self._extra = {"sockname": sockname, "peername": peername}
        self._fin_sent = False
        self._fin_received = False
        self._lost = False
        self.bytes_sent = 0

    def attach(self, protocol) -> None:
        self._protocol = protocol
        protocol.connection_made(self)

    def get_extra_info(self, name, default=None):
        return self._extra.get(name, default)

    def get_protocol(self):
        return self._protocol

    def set_protocol(self, protocol):
        self._protocol = protocol

    def is_closing(self) -> bool:
        return self._fin_sent

    def is_reading(self) -> bool:
        return not self._lost

    def pause_reading(self) -> None:
        pass

    def resume_reading(self) -> None:
        pass

    def get_write_buffer_size(self) -> int:
        return 0

    def set_write_buffer_limits(self, high=None, low=None) -> None:
        pass

    def can_write_eof(self) -> bool:
        return True

    def write(self, data) -> None:
        if self._fin_sent or not data:
            return
        data = bytes(data)
        self.bytes_sent += len(data)
        for i in range(0, len(data), MSS):
            chunk = data[i:i + MSS]
            self.net.send(self.src, self.dst, Packet(self.flow, len(chunk) + WIRE_OVERHEAD, chunk),
                          self._deliver_to_peer)

    def _deliver_to_peer(self, pkt: Packet) -> None:
        peer = self.peer
        if peer is not None and not peer._lost and not peer._fin_received:
            peer._protocol.data_received(pkt.payload)

    def write_eof(self) -> None:
        if self._fin_sent:
            return
        self._fin_sent = True
        self.net.send(self.src, self.dst, Packet(self.flow, WIRE_OVERHEAD, kind="fin"),
                      self._fin_to_peer)
        self._maybe_lost()

    def _fin_to_peer(self, pkt: Packet) -> None:
        peer = self.peer
        if peer is None or peer._lost or peer._fin_received:
            return
        peer._fin_received = True
        peer._protocol.eof_received()
        peer._maybe_lost()

    def _maybe_lost(self) -> None:
        if self._fin_sent and self._fin_received:
            self._lose()

    def _lose(self) -> None:
        if not self._lost:
            self._lost = True
            self.net.loop.call_soon(self._protocol.connection_lost, None)

    def close(self) -> None:
        self.write_eof()
        self._lose()

    def abort(self) -> None:
        self.close()
