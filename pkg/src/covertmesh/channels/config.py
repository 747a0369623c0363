from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields, replace

from ..codec import BLOCK_SIZES, Mode


class Carrier(str, enum.Enum):
    MEDIA = "MEDIA"
    TUNNEL = "TUNNEL"


class Role(str, enum.Enum):
    INITIATOR = "INITIATOR"
    RECEIVER = "RECEIVER"


class ConfigError(ValueError):
    pass


DEFAULT_PSK = bytes(32)


@dataclass(frozen=True)
class ChannelConfig:
    carrier: Carrier = Carrier.TUNNEL
    mode: Mode = Mode.REPLACE
    block_size: int = 536
    fps: float = 30.0
    key_frame_interval: int = 150
    key_frame_size: int = 12000
    delta_frame_mean: float = 1200.0
    delta_frame_std: float = 300.0
    delta_frame_min: int = 100
    delta_frame_max: int = 4000
    frame_header_len: int = 12
    prng_seed: int = 0
    psk: bytes = field(default=DEFAULT_PSK, repr=False)
    allowed_block_sizes: tuple[int, ...] = BLOCK_SIZES

    def __post_init__(self):
        object.__setattr__(self, "carrier", Carrier(self.carrier))
        object.__setattr__(self, "mode", Mode(self.mode))
        self.validate()

    def validate(self) -> None:
        if self.fps <= 0:
            raise ConfigError("fps must be positive")
        if self.block_size not in self.allowed_block_sizes:
            raise ConfigError(f"block_size {self.block_size} not in {self.allowed_block_sizes}")
        if not self.delta_frame_min <= self.delta_frame_mean <= self.delta_frame_max:
            raise ConfigError("delta frame mean outside truncation bounds")
        if self.delta_frame_min <= self.frame_header_len:
            raise ConfigError("delta_frame_min must exceed the frame header length")
        if len(self.psk) != 32:
            raise ConfigError("psk must be 32 bytes")

    def negotiated(self) -> dict[str, str]:
        """Parameters both peers must agree on during signaling."""
        return {"carrier": self.carrier.value, "mode": self.mode.value,
                "block_size": str(self.block_size), "fps": f"{self.fps:g}"}

    def with_params(self, params: dict[str, str]) -> "ChannelConfig":
        return replace(self, carrier=Carrier(params["carrier"]), mode=Mode(params["mode"]),
                       block_size=int(params["block_size"]), fps=float(params["fps"]))

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown channel settings: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("psk"), str):
            d["psk"] = bytes.fromhex(d["psk"])
        if "allowed_block_sizes" in d:
            d["allowed_block_sizes"] = tuple(d["allowed_block_sizes"])
        return cls(**d)
