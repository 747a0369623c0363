"""Node identities, deployment files and per-node configuration (YAML)."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from ..channels import Carrier, ChannelConfig, ConfigError
from ..channels.config import DEFAULT_PSK


class NodeRole(str, enum.Enum):
    GATEWAY = "gateway"
    PROXY = "proxy"
    BRIDGE = "bridge"


def parse_addr(text: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    host, sep, port = str(text).rpartition(":")
    if not sep:
        host, port = default_host, text
    try:
        return (host.strip("[]") or default_host), int(port)
    except ValueError:
        raise ConfigError(f"bad address {text!r}") from None


@dataclass(frozen=True)
class NodeIdentity:
    node_id: int
    host: str
    port: int
    role: NodeRole = NodeRole.PROXY
    carriers: tuple[Carrier, ...] = (Carrier.TUNNEL, Carrier.MEDIA)
    psk: bytes = field(default=DEFAULT_PSK, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "role", NodeRole(self.role))
        object.__setattr__(self, "carriers", tuple(Carrier(c) for c in self.carriers))
        if not 0 <= self.node_id <= 0xFFFFFFFF:
            raise ConfigError(f"node_id {self.node_id} does not fit 32 bits")
        if not self.carriers:
            raise ConfigError(f"node {self.node_id} supports no carrier")
        if len(self.psk) != 32:
            raise ConfigError(f"node {self.node_id}: psk must be 32 bytes")

    @classmethod
    def from_dict(cls, d: dict) -> "NodeIdentity":
        d = dict(d)
        if "listen" in d:
            d["host"], d["port"] = parse_addr(d.pop("listen"))
        if isinstance(d.get("psk"), str):
            d["psk"] = bytes.fromhex(d["psk"])
        if "carriers" in d:
            d["carriers"] = tuple(d["carriers"])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None


class Deployment:
    """The set of nodes a gateway or proxy may route through."""

    def __init__(self, nodes: list[NodeIdentity]):
        self.nodes: dict[int, NodeIdentity] = {}
        for n in nodes:
            if n.node_id in self.nodes:
                raise ConfigError(f"duplicate node_id {n.node_id} in deployment")
            self.nodes[n.node_id] = n

    def __contains__(self, node_id: int) -> bool:
        return node_id in self.nodes

    def __getitem__(self, node_id: int) -> NodeIdentity:
        return self.nodes[node_id]

    def get(self, node_id: int) -> Optional[NodeIdentity]:
        return self.nodes.get(node_id)

    def by_role(self, role: NodeRole) -> list[int]:
        return sorted(i for i, n in self.nodes.items() if n.role is NodeRole(role))

    @classmethod
    def from_list(cls, records: list[dict]) -> "Deployment":
        return cls([NodeIdentity.from_dict(r) for r in records])

    @classmethod
    def load(cls, path: str | Path) -> "Deployment":
        data = yaml.safe_load(Path(path).read_text())
        records = data.get("nodes", []) if isinstance(data, dict) else data
        return cls.from_list(records or [])


@dataclass
class NodeConfig:
    """Everything one node process needs: who it is, who else exists, how to talk."""
    identity: NodeIdentity
    deployment: Deployment
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    peer_channels: dict[int, ChannelConfig] = field(default_factory=dict)
    bridge: Optional[int] = None
    upstream: Optional[tuple[str, int]] = None
    keepalive: float = 15.0
    dead_after: float = 60.0
    seed: Optional[int] = None
    # relays re-encapsulate with the carrier parameters of the inbound hop
    mirror: bool = True

    def channel_for(self, peer: int, like: Optional[ChannelConfig] = None) -> ChannelConfig:
        cfg = self.peer_channels.get(peer, self.channel)
        if like is not None and self.mirror:
            cfg = cfg.with_params(like.negotiated())
        peer_id = self.deployment.get(peer)
        if peer_id is not None and cfg.carrier not in peer_id.carriers:
            cfg = ChannelConfig.from_dict({**_channel_fields(cfg), "carrier": peer_id.carriers[0]})
        psk = peer_id.psk if peer_id is not None else cfg.psk
        return ChannelConfig.from_dict({**_channel_fields(cfg), "psk": psk})

    @classmethod
    def from_dict(cls, d: dict, base: Path = Path(".")) -> "NodeConfig":
        d = dict(d)
        dep = d.pop("deployment", [])
        deployment = (Deployment.load(base / dep) if isinstance(dep, str)
                      else Deployment.from_list(dep))
        if "identity" in d:
            identity = NodeIdentity.from_dict(d.pop("identity"))
        else:
            node_id = d.pop("node_id", None)
            if node_id is None or node_id not in deployment:
                raise ConfigError("config names no node_id present in the deployment")
            identity = deployment[node_id]
        if identity.node_id not in deployment:
            deployment.nodes[identity.node_id] = identity
        chan = d.pop("channel", {}) or {}
        chan.setdefault("psk", identity.psk)
        channel = ChannelConfig.from_dict(chan)
        peers = {int(k): ChannelConfig.from_dict({**_channel_fields(channel), **v})
                 for k, v in (d.pop("peers", {}) or {}).items()}
        upstream = d.pop("upstream", None)
        try:
            return cls(identity, deployment, channel, peers,
                       upstream=parse_addr(upstream) if upstream else None, **d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path: str | Path) -> "NodeConfig":
        path = Path(path)
        return cls.from_dict(yaml.safe_load(path.read_text()) or {}, path.parent)


def _channel_fields(cfg: ChannelConfig) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
