"""Encrypted tunnel records.

A record is a 2-byte big-endian ciphertext length followed by ChaCha20-Poly1305
ciphertext. The nonce is the 64-bit record counter (left-padded to 12 bytes)
and the length prefix is bound as associated data. Each direction has its own
key derived from the pre-shared key and the session id, so counters never
collide across directions or sessions.
"""

from __future__ import annotations

import asyncio
import struct

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

MAX_RECORD_PLAINTEXT = 16 * 1024
TAG_LEN = 16


class AuthFailure(Exception):
    pass


def derive_key(psk: bytes, session_id: int, direction: str) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=32, salt=session_id.to_bytes(8, "big"),
                info=b"covertmesh tunnel " + direction.encode()).derive(psk)


def _nonce(counter: int) -> bytes:
    return bytes(4) + counter.to_bytes(8, "big")


class RecordSealer:
    def __init__(self, key: bytes):
        self._aead = ChaCha20Poly1305(key)
        self.counter = 0

    def seal(self, plaintext: bytes) -> bytes:
        if not 0 < len(plaintext) <= MAX_RECORD_PLAINTEXT:
            raise ValueError(f"record plaintext must be 1..{MAX_RECORD_PLAINTEXT} bytes")
        if self.counter >= 2 ** 64:
            raise AuthFailure("record counter exhausted")
        head = struct.pack(">H", len(plaintext) + TAG_LEN)
        ct = self._aead.encrypt(_nonce(self.counter), plaintext, head)
        self.counter += 1
        return head + ct


class RecordOpener:
    def __init__(self, key: bytes):
        self._aead = ChaCha20Poly1305(key)
        self.counter = 0

    def open(self, record: bytes) -> bytes:
        head, ct = record[:2], record[2:]
        if len(record) < 2 + TAG_LEN or struct.unpack(">H", head)[0] != len(ct):
            raise AuthFailure("malformed tunnel record")
        try:
            pt = self._aead.decrypt(_nonce(self.counter), ct, head)
        except InvalidTag:
            raise AuthFailure(f"record {self.counter} failed authentication") from None
        self.counter += 1
        return pt


async def read_record(reader: asyncio.StreamReader) -> bytes:
    """Read one raw record; returns b"" at clean end of stream."""
    try:
        head = await reader.readexactly(2)
    except asyncio.IncompleteReadError as e:
        if e.partial:
            raise AuthFailure("truncated record header") from None
        return b""
    (length,) = struct.unpack(">H", head)
    try:
        return head + await reader.readexactly(length)
    except asyncio.IncompleteReadError:
        raise AuthFailure("truncated record") from None
