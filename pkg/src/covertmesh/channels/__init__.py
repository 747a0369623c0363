from .channel import (BlockPacker, Channel, MediaChannel, TunnelChannel, establish_channel,
                      receiver_policy, unpack_block)
from .config import Carrier, ChannelConfig, ConfigError, Role
from .media import FrameSource, frame_source_next, media_recv_loop, media_send_loop
from .signaling import (MsgType, ParameterMismatch, SignalingError, SignalingMessage,
                        SignalingTimeout)
from .tunnel import AuthFailure, RecordOpener, RecordSealer, derive_key

__all__ = [
    "AuthFailure", "BlockPacker", "Carrier", "Channel", "ChannelConfig", "ConfigError",
    "FrameSource", "MediaChannel", "MsgType", "ParameterMismatch", "RecordOpener",
    "RecordSealer", "Role", "SignalingError", "SignalingMessage", "SignalingTimeout",
    "TunnelChannel", "derive_key", "establish_channel", "frame_source_next",
    "media_recv_loop", "media_send_loop", "receiver_policy", "unpack_block",
]
