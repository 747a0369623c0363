"""Byte-exact wire formats against the checked-in vectors in golden/vectors.json."""

import json
import struct
import zlib
from pathlib import Path

import pytest

from covertmesh.channels import (MsgType, RecordOpener, RecordSealer, SignalingMessage,
                                 derive_key)
from covertmesh.codec import FragmentHeader, decode_fragment, encode_fragment

VECTORS = json.loads((Path(__file__).parent / "golden" / "vectors.json").read_text())
PSK = bytes.fromhex(VECTORS["psk"])
SESSION = VECTORS["session_id"]


@pytest.mark.parametrize("v", VECTORS["fragments"], ids=lambda v: f"{v['stream_id']}-{v['frag_index']}")
def test_fragment_wire(v):
    payload = bytes.fromhex(v["payload"])
    h = FragmentHeader(v["stream_id"], v["block_seq"], v["frag_index"], v["frag_count"], 0)
    wire = encode_fragment(h, payload)
    assert wire.hex() == v["wire"]
    got_h, got_p = decode_fragment(bytes.fromhex(v["wire"]))
    assert got_p == payload and got_h.frag_count == v["frag_count"]


@pytest.mark.parametrize("v", VECTORS["fragments"][:2])
def test_fragment_header_by_hand(v):
    # independent layout: magic, sid, seq, index, count, length, crc32 over zeroed header + payload
    payload = bytes.fromhex(v["payload"])
    fields = (0x544B, v["stream_id"], v["block_seq"], v["frag_index"], v["frag_count"], len(payload))
    zeroed = struct.pack(">HIIHHHI", *fields, 0)
    crc = zlib.crc32(zeroed + payload)
    assert bytes.fromhex(v["wire"])[:20] == struct.pack(">HIIHHHI", *fields, crc)


@pytest.mark.parametrize("v", VECTORS["signaling"], ids=lambda v: v["type"])
def test_signaling_wire(v):
    msg = SignalingMessage(MsgType[v["type"]], v["session_id"], v["body"])
    assert msg.pack().hex() == v["wire"]
    assert SignalingMessage.unpack(bytes.fromhex(v["wire"])) == msg


def test_records_wire():
    sealers = {d: RecordSealer(derive_key(PSK, SESSION, d)) for d in ("i2r", "r2i")}
    openers = {d: RecordOpener(derive_key(PSK, SESSION, d)) for d in ("i2r", "r2i")}
    for v in VECTORS["records"]:
        s = sealers[v["direction"]]
        assert s.counter == v["counter"]
        pt = bytes.fromhex(v["plaintext"])
        wire = s.seal(pt)
        assert wire.hex() == v["wire"]
        assert int.from_bytes(wire[:2], "big") == len(pt) + 16
        assert openers[v["direction"]].open(wire) == pt
