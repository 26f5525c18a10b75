"""Independent implementation of the community wire protocol.

Messages are handled directly in their canonical dictionary form (the same
shape the shared conformance vectors use):

    {"kind": "HEARTBEAT", "sender": "<32 hex>", "namespace": "...",
     "body": None}

with kind-specific bodies for ANNOUNCE, MODEL_SPEC and WEIGHTS; tensor
data rides as hex of the raw little-endian bytes. encode() and decode()
are exact inverses over valid frames, and decode() rejects everything
else with one of the five typed errors.
"""

from __future__ import annotations

import struct

MAGIC = b"SBFL"
VERSION = 1

KIND_BYTES = {
    "ANNOUNCE": 1,
    "HELLO": 2,
    "MODEL_REQUEST": 3,
    "MODEL_SPEC": 4,
    "WEIGHTS": 5,
    "HEARTBEAT": 6,
    "GOODBYE": 7,
}
KIND_NAMES = {v: k for k, v in KIND_BYTES.items()}
EMPTY_KINDS = ("HELLO", "MODEL_REQUEST", "HEARTBEAT", "GOODBYE")

MODE_BYTES = {"seed": 1, "leech": 2, "peer": 3, "block": 4}
MODE_NAMES = {v: k for k, v in MODE_BYTES.items()}

DTYPE_BYTES = {"f32": 0, "f64": 1}
DTYPE_NAMES = {v: k for k, v in DTYPE_BYTES.items()}
DTYPE_SIZES = {"f32": 4, "f64": 8}

MAX_NDIM = 8


class ProtocolError(Exception):
    pass


class BadMagic(ProtocolError):
    pass


class UnsupportedVersion(ProtocolError):
    pass


class TruncatedFrame(ProtocolError):
    pass


class UnknownKind(ProtocolError):
    pass


class MalformedPayload(ProtocolError):
    pass


ERRORS_BY_NAME = {
    "BadMagic": BadMagic,
    "UnsupportedVersion": UnsupportedVersion,
    "TruncatedFrame": TruncatedFrame,
    "UnknownKind": UnknownKind,
    "MalformedPayload": MalformedPayload,
}


def message(kind, sender_hex, namespace, body=None):
    return {"kind": kind, "sender": sender_hex, "namespace": namespace, "body": body}


# -- encoding ----------------------------------------------------------------

def _pack_entry_header(entry):
    name = entry["name"].encode("utf-8")
    parts = [struct.pack("<H", len(name)), name,
             struct.pack("<B", DTYPE_BYTES[entry["dtype"]]),
             struct.pack("<B", len(entry["shape"]))]
    parts += [struct.pack("<I", dim) for dim in entry["shape"]]
    return b"".join(parts)


def _pack_body(kind, body):
    if kind in EMPTY_KINDS:
        return b""
    if kind == "ANNOUNCE":
        addr = body["address"].encode("utf-8")
        return struct.pack("<B", MODE_BYTES[body["mode"]]) + struct.pack("<H", len(addr)) + addr
    if kind == "MODEL_SPEC":
        parts = [struct.pack("<H", len(body["layout"]))]
        parts += [_pack_entry_header(e) for e in body["layout"]]
        return b"".join(parts)
    if kind == "WEIGHTS":
        parts = [
            struct.pack("<Q", body["round"]),
            struct.pack("<Q", body["sample_count"]),
            struct.pack("<H", len(body["entries"])),
        ]
        for entry in body["entries"]:
            parts.append(_pack_entry_header(entry))
            parts.append(bytes.fromhex(entry["data_hex"]))
        return b"".join(parts)
    raise ProtocolError(f"cannot encode kind {kind!r}")


def encode(msg) -> bytes:
    ns = msg["namespace"].encode("utf-8")
    if not 1 <= len(ns) <= 255:
        raise ProtocolError("namespace must be 1..255 bytes")
    payload = _pack_body(msg["kind"], msg.get("body"))
    return b"".join(
        [
            MAGIC,
            struct.pack("<B", VERSION),
            struct.pack("<B", KIND_BYTES[msg["kind"]]),
            bytes.fromhex(msg["sender"]),
            struct.pack("<B", len(ns)),
            ns,
            struct.pack("<I", len(payload)),
            payload,
        ]
    )


# -- decoding ----------------------------------------------------------------

class _Cursor:
    def __init__(self, data, start, end):
        self.data = data
        self.at = start
        self.end = end

    def left(self):
        return self.end - self.at

    def grab(self, n, err):
        if self.left() < n:
            raise err(f"wanted {n} bytes, {self.left()} left")
        piece = self.data[self.at : self.at + n]
        self.at += n
        return piece

    def u8(self, err):
        return self.grab(1, err)[0]

    def u16(self, err):
        return struct.unpack("<H", self.grab(2, err))[0]

    def u32(self, err):
        return struct.unpack("<I", self.grab(4, err))[0]

    def u64(self, err):
        return struct.unpack("<Q", self.grab(8, err))[0]


def _text(raw, what):
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError:
        raise MalformedPayload(f"{what} not valid UTF-8") from None


def _unpack_entry_header(cur):
    name = _text(cur.grab(cur.u16(MalformedPayload), MalformedPayload), "entry name")
    dtype_byte = cur.u8(MalformedPayload)
    if dtype_byte not in DTYPE_NAMES:
        raise MalformedPayload(f"dtype byte {dtype_byte}")
    ndim = cur.u8(MalformedPayload)
    if ndim > MAX_NDIM:
        raise MalformedPayload(f"rank {ndim} over {MAX_NDIM}")
    shape = [cur.u32(MalformedPayload) for _ in range(ndim)]
    if any(d < 1 for d in shape):
        raise MalformedPayload("zero dimension")
    return name, DTYPE_NAMES[dtype_byte], shape


def _unpack_body(kind, cur):
    if kind in EMPTY_KINDS:
        if cur.left():
            raise MalformedPayload(f"{kind} carries no payload")
        return None
    if kind == "ANNOUNCE":
        mode_byte = cur.u8(MalformedPayload)
        if mode_byte not in MODE_NAMES:
            raise MalformedPayload(f"mode byte {mode_byte}")
        address = _text(cur.grab(cur.u16(MalformedPayload), MalformedPayload), "address")
        return {"mode": MODE_NAMES[mode_byte], "address": address}
    if kind == "MODEL_SPEC":
        layout = []
        names = set()
        for _ in range(cur.u16(MalformedPayload)):
            name, dtype, shape = _unpack_entry_header(cur)
            if name in names:
                raise MalformedPayload(f"duplicate entry {name!r}")
            names.add(name)
            layout.append({"name": name, "dtype": dtype, "shape": shape})
        return {"layout": layout}
    if kind == "WEIGHTS":
        rnd = cur.u64(MalformedPayload)
        samples = cur.u64(MalformedPayload)
        entries = []
        names = set()
        for _ in range(cur.u16(MalformedPayload)):
            name, dtype, shape = _unpack_entry_header(cur)
            if name in names:
                raise MalformedPayload(f"duplicate entry {name!r}")
            names.add(name)
            count = 1
            for dim in shape:
                count *= dim
            raw = cur.grab(count * DTYPE_SIZES[dtype], MalformedPayload)
            entries.append({"name": name, "dtype": dtype, "shape": shape,
                            "data_hex": raw.hex()})
        return {"round": rnd, "sample_count": samples, "entries": entries}
    raise UnknownKind(kind)


def decode(buf: bytes):
    buf = bytes(buf)
    if len(buf) < 6:
        raise TruncatedFrame(f"{len(buf)} bytes")
    if buf[:4] != MAGIC:
        raise BadMagic(repr(buf[:4]))
    if buf[4] != VERSION:
        raise UnsupportedVersion(str(buf[4]))
    if buf[5] not in KIND_NAMES:
        raise UnknownKind(f"{buf[5]:#04x}")
    kind = KIND_NAMES[buf[5]]
    cur = _Cursor(buf, 6, len(buf))
    sender = cur.grab(16, TruncatedFrame).hex()
    ns_len = cur.u8(TruncatedFrame)
    ns_raw = cur.grab(ns_len, TruncatedFrame)
    if ns_len == 0:
        raise MalformedPayload("empty namespace")
    namespace = _text(ns_raw, "namespace")
    paylen = cur.u32(TruncatedFrame)
    if cur.left() < paylen:
        raise TruncatedFrame(f"payload wants {paylen}, has {cur.left()}")
    if cur.left() > paylen:
        raise MalformedPayload(f"{cur.left() - paylen} trailing bytes")
    body_cur = _Cursor(buf, cur.at, cur.at + paylen)
    body = _unpack_body(kind, body_cur)
    if body_cur.left():
        raise MalformedPayload(f"{body_cur.left()} unread payload bytes")
    return message(kind, sender, namespace, body)
