from .config import Deployment, NodeConfig, NodeIdentity, NodeRole, parse_addr
from .control import (CloseReason, ControlDecoder, ControlError, ControlMessage, Exit, Join,
                      MsgType, NextHop, decode_route, encode_route)
from .node import (ChannelLeg, Gateway, MultipathLeg, Node, PeerLink, RealNet, SocketLeg,
                   splice)
from .socks import Reply, SocksError, SocksRequest, client_connect, server_handshake

__all__ = [
    "ChannelLeg", "CloseReason", "ControlDecoder", "ControlError", "ControlMessage",
    "Deployment", "Exit", "Gateway", "Join", "MsgType", "MultipathLeg", "NextHop", "Node",
    "NodeConfig", "NodeIdentity", "NodeRole", "PeerLink", "RealNet", "Reply", "SocketLeg",
    "SocksError", "SocksRequest", "client_connect", "decode_route", "encode_route",
    "parse_addr", "server_handshake", "splice",
]
