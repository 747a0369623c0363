"""The emulated desk deployment: users, proxies, a bridge and an HTTP-like server."""

from __future__ import annotations

import asyncio
import enum
import hashlib
import random
from dataclasses import dataclass, field
from typing import Optional

from ..channels import Carrier, ChannelConfig
from ..multipath import PathSpec, Policy
from ..nodes import Deployment, Gateway, Node, NodeConfig, NodeIdentity, client_connect
from ..nodes.socks import Reply
from .emulator import LinkSpec, VirtualNetwork

NODE_PORT = 9000
SOCKS_PORT = 1080
HTTP_PORT = 80
BRIDGE_ID = 100
PROXY_BASE = 10
GATEWAY_BASE = 1000


class DeployMode(str, enum.Enum):
    PT = "PT"                  # gateway straight to the bridge
    STANDALONE = "STANDALONE"  # proxies only; the last proxy exits to the server
    COMBINED = "COMBINED"      # gateway, proxy chain, bridge


@dataclass
class TopologySpec:
    user_proxy_ms: float = 20.0
    proxy_proxy_ms: float = 15.0
    proxy_bridge_ms: float = 25.0
    bridge_server_ms: float = 30.0
    bandwidth_kbps: float = 1_000_000.0
    bridge_server_kbps: Optional[float] = None
    jitter_ms: float = 0.0
    n_proxies: int = 4
    client_lan_ms: float = 1.0  # application host to its gateway, when present

    @classmethod
    def from_dict(cls, d: dict) -> "TopologySpec":
        return cls(**d)


def body_for(path: str, size: int) -> bytes:
    """Deterministic response body; distinct paths give unrelated bytes."""
    seed = int.from_bytes(hashlib.sha256(path.encode()).digest()[:8], "big")
    return random.Random(seed).randbytes(size)


class FileServer:
    """Minimal HTTP/1.0-style server.

    ``GET /<name>?size=<n>`` answers with ``n`` deterministic bytes derived
    from the path, so every client can check its body bit-exactly.
    """

    def __init__(self, default_size: int = 250 * 1024):
        self.default_size = default_size
        self.requests = 0

    @staticmethod
    def parse(line: bytes) -> tuple[str, int | None]:
        parts = line.decode("ascii", "replace").split()
        path = parts[1] if len(parts) >= 2 else "/"
        size = None
        if "?size=" in path:
            try:
                size = int(path.rsplit("?size=", 1)[1])
            except ValueError:
                size = None
        return path.split("?", 1)[0], size

    async def handle(self, reader: asyncio.StreamReader, writer) -> None:
        try:
            line = await reader.readline()
            while True:
                h = await reader.readline()
                if h in (b"\r\n", b"\n", b""):
                    break
        except (ConnectionError, asyncio.IncompleteReadError):
            writer.close()
            return
        self.requests += 1
        path, size = self.parse(line)
        body = body_for(path, self.default_size if size is None else size)
        writer.write(b"HTTP/1.0 200 OK\r\nContent-Length: %d\r\n\r\n" % len(body) + body)
        try:
            await writer.drain()
        except ConnectionError:
            pass
        writer.close()


@dataclass
class FetchResult:
    ok: bool
    reply: str
    body: bytes = b""
    t_start: float = 0.0
    t_request: float = 0.0
    t_first_byte: float = 0.0
    t_done: float = 0.0

    @property
    def ttfb(self) -> float:
        """Connect to first response byte, seconds."""
        return self.t_first_byte - self.t_start

    @property
    def transfer_seconds(self) -> float:
        """Request sent to last byte, seconds."""
        return self.t_done - self.t_request


async def fetch(host, proxy: Optional[tuple[str, int]], server: tuple[str, int], path: str,
                timeout: float = 120.0) -> FetchResult:
    """Fetch ``path`` from ``server``, through a SOCKS5 ``proxy`` unless it is None."""
    loop = asyncio.get_running_loop()
    res = FetchResult(False, "", t_start=loop.time())

    async def go():
        if proxy is None:
            reader, writer = await host.open_connection(*server)
        else:
            reader, writer = await host.open_connection(*proxy)
            rep = await client_connect(reader, writer, *server)
            if rep is not Reply.SUCCEEDED:
                res.reply = rep.name
                writer.close()
                return
        res.reply = Reply.SUCCEEDED.name
        res.t_request = loop.time()
        writer.write(f"GET {path} HTTP/1.0\r\nHost: {server[0]}\r\n\r\n".encode())
        first = await reader.read(65536)
        res.t_first_byte = loop.time()
        chunks = [first]
        while True:
            d = await reader.read(65536)
            if not d:
                break
            chunks.append(d)
        res.t_done = loop.time()
        writer.close()
        raw = b"".join(chunks)
        head, _, body = raw.partition(b"\r\n\r\n")
        res.body = body
        res.ok = bool(first) and head.startswith(b"HTTP/1.0 200")

    try:
        await asyncio.wait_for(go(), timeout)
    except asyncio.TimeoutError:
        res.reply = "TIMEOUT"
    except (ConnectionError, asyncio.IncompleteReadError) as e:
        res.reply = type(e).__name__
    return res


@dataclass
class UserSetup:
    host: str
    carrier: ChannelConfig
    k: int = 1


@dataclass
class Deployed:
    net: VirtualNetwork
    gateways: list[Gateway]
    nodes: dict[int, Node]
    server: FileServer
    users: list[str]
    proxies: list[str] = field(default_factory=list)

    def proxy_addr(self, i: int) -> tuple[str, int]:
        return (self.users[i], SOCKS_PORT)

    async def stop(self) -> None:
        for n in list(self.nodes.values()) + self.gateways:
            await n.stop()


def proxy_host(i: int) -> str:
    return f"p{i + 1}"


def user_host(i: int) -> str:
    return f"u{i:02d}"


def client_host(i: int) -> str:
    return f"c{i:02d}"


def build_network(topo: TopologySpec, n_users: int, seed: int, clients: bool = False) -> VirtualNetwork:
    """Users, proxies, bridge and server; ``clients`` adds an application host behind each user."""
    net = VirtualNetwork(seed)
    bw = topo.bandwidth_kbps
    proxies = [proxy_host(i) for i in range(topo.n_proxies)]
    for u in range(n_users):
        if clients:
            net.add_link(LinkSpec(client_host(u), user_host(u), topo.client_lan_ms, 0.0, bw))
        for p in proxies:
            net.add_link(LinkSpec(user_host(u), p, topo.user_proxy_ms, topo.jitter_ms, bw))
    for i, p in enumerate(proxies):
        for q in proxies[i + 1:]:
            net.add_link(LinkSpec(p, q, topo.proxy_proxy_ms, topo.jitter_ms, bw))
        net.add_link(LinkSpec(p, "bridge", topo.proxy_bridge_ms, topo.jitter_ms, bw))
    net.add_link(LinkSpec("bridge", "server", topo.bridge_server_ms, topo.jitter_ms,
                          topo.bridge_server_kbps or bw))
    return net


def user_paths(mode: DeployMode, k: int, hops: int = 1) -> list[PathSpec]:
    """Overlay paths for one user: ``k`` node-disjoint proxy chains of ``hops`` proxies."""
    mode = DeployMode(mode)
    if mode is DeployMode.PT:
        if k != 1:
            raise ValueError("PT mode has a single path")
        return [PathSpec(0, (BRIDGE_ID,))]
    paths = []
    for i in range(k):
        chain = tuple(PROXY_BASE + i * hops + j for j in range(hops))
        paths.append(PathSpec(i, chain + ((BRIDGE_ID,) if mode is DeployMode.COMBINED or k > 1 else ())))
    return paths


async def deploy(net: VirtualNetwork, users: list[UserSetup], mode: DeployMode, seed: int,
                 topo: TopologySpec, hops: int = 1, policy: Policy = Policy.ROUND_ROBIN,
                 server: Optional[FileServer] = None) -> Deployed:
    """Start every node on ``net`` and a SOCKS front end on each user host."""
    mode = DeployMode(mode)
    recs = [NodeIdentity(BRIDGE_ID, "bridge", NODE_PORT, "bridge")]
    recs += [NodeIdentity(PROXY_BASE + i, proxy_host(i), NODE_PORT, "proxy")
             for i in range(topo.n_proxies)]
    recs += [NodeIdentity(GATEWAY_BASE + i, u.host, NODE_PORT, "gateway") for i, u in enumerate(users)]
    dep = Deployment(recs)
    server = server or FileServer()
    await net.host("server").start_server(server.handle, HTTP_PORT)

    nodes: dict[int, Node] = {}
    relay_cfg = ChannelConfig(carrier=Carrier.TUNNEL)
    for ident in recs[:1 + topo.n_proxies]:
        # relays answer the carrier they are offered and mirror it onward
        cfg = NodeConfig(ident, dep, relay_cfg, seed=seed * 1000 + ident.node_id)
        node = Node(cfg, net.host(ident.host))
        await node.start()
        nodes[ident.node_id] = node

    gateways = []
    for i, u in enumerate(users):
        ident = dep[GATEWAY_BASE + i]
        cfg = NodeConfig(ident, dep, u.carrier, seed=seed * 1000 + ident.node_id)
        gw = Gateway(cfg, user_paths(mode, u.k, hops), net.host(u.host), policy)
        await gw.serve_socks(SOCKS_PORT)
        gateways.append(gw)
    return Deployed(net, gateways, nodes, server, [u.host for u in users],
                    [proxy_host(i) for i in range(topo.n_proxies)])
