"""Bit-exact binary codec for inter-node messages, independent of transport.

Frame layout (all integers little-endian):

    magic   4 bytes  "SBFL"
    version u8       currently 1, unknown versions are rejected
    kind    u8       message kind, 0x01..0x07
    sender  16 bytes node id
    nslen   u8       namespace byte length, >= 1
    ns      nslen    namespace, UTF-8
    paylen  u32      payload byte length
    payload paylen   kind-specific body

Bodies:

    ANNOUNCE      mode u8 (1=seed 2=leech 3=peer 4=block),
                  addrlen u16, addr UTF-8
    MODEL_SPEC    count u16, then per entry:
                  namelen u16, name UTF-8, dtype u8 (0=f32 1=f64),
                  ndim u8, dims u32 each
    WEIGHTS       round u64, sample_count u64, count u16, then per entry:
                  namelen u16, name UTF-8, dtype u8, ndim u8, dims u32 each,
                  raw element bytes (little-endian IEEE-754, row-major)
    HELLO / MODEL_REQUEST / HEARTBEAT / GOODBYE    empty

A decoder must be total over arbitrary byte strings: anything that is not
the exact image of an encode raises one of the typed errors below, never a
crash. Trailing bytes after the declared payload are rejected.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .core import (
    MAX_NAMESPACE_BYTES,
    MAX_TENSOR_NDIM,
    NODE_ID_LEN,
    Dtype,
    ModelSpec,
    Namespace,
    NodeId,
    ParameterSet,
    SharingMode,
    Tensor,
)

MAGIC = b"SBFL"
VERSION = 1

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")

_MAX_U16 = 0xFFFF
_MAX_U32 = 0xFFFFFFFF
_MAX_U64 = 0xFFFFFFFFFFFFFFFF


class MessageKind(enum.IntEnum):
    ANNOUNCE = 0x01
    HELLO = 0x02
    MODEL_REQUEST = 0x03
    MODEL_SPEC = 0x04
    WEIGHTS = 0x05
    HEARTBEAT = 0x06
    GOODBYE = 0x07


_EMPTY_BODY_KINDS = frozenset(
    {MessageKind.HELLO, MessageKind.MODEL_REQUEST, MessageKind.HEARTBEAT, MessageKind.GOODBYE}
)

_MODE_TO_BYTE = {
    SharingMode.SEED: 1,
    SharingMode.LEECH: 2,
    SharingMode.PEER: 3,
    SharingMode.BLOCK: 4,
}
_BYTE_TO_MODE = {v: k for k, v in _MODE_TO_BYTE.items()}

_DTYPE_TO_BYTE = {Dtype.F32: 0, Dtype.F64: 1}
_BYTE_TO_DTYPE = {v: k for k, v in _DTYPE_TO_BYTE.items()}


class WireError(Exception):
    """Base class for codec failures."""


class EncodeError(WireError):
    pass


class BodyTooLarge(EncodeError):
    pass


class InvalidNamespace(EncodeError):
    pass


class DecodeError(WireError):
    pass


class BadMagic(DecodeError):
    pass


class UnsupportedVersion(DecodeError):
    pass


class TruncatedFrame(DecodeError):
    pass


class UnknownKind(DecodeError):
    pass


class MalformedPayload(DecodeError):
    pass


@dataclass(frozen=True)
class Announce:
    """ANNOUNCE body: the sender's advertised role and listen address."""

    mode: SharingMode
    address: str


Body = Union[None, Announce, ModelSpec, ParameterSet]


@dataclass(frozen=True)
class Message:
    """Tagged wire envelope. `body` type depends on `kind`."""

    kind: MessageKind
    sender: NodeId
    namespace: Namespace
    body: Body = None

    def __post_init__(self):
        expected = {
            MessageKind.ANNOUNCE: Announce,
            MessageKind.MODEL_SPEC: ModelSpec,
            MessageKind.WEIGHTS: ParameterSet,
        }
        if self.kind in expected:
            if not isinstance(self.body, expected[self.kind]):
                raise TypeError(
                    f"{self.kind.name} body must be {expected[self.kind].__name__}"
                )
        elif self.body is not None:
            raise TypeError(f"{self.kind.name} body must be empty")
        # The frame carries no separate origin field: weights always travel
        # under their owner's envelope.
        if self.kind is MessageKind.WEIGHTS and self.body.origin != self.sender:
            raise TypeError("WEIGHTS body origin must equal the frame sender")


def announce(sender: NodeId, namespace: Namespace, mode: SharingMode, address: str) -> Message:
    return Message(MessageKind.ANNOUNCE, sender, namespace, Announce(mode, address))


def heartbeat(sender: NodeId, namespace: Namespace) -> Message:
    return Message(MessageKind.HEARTBEAT, sender, namespace)


def goodbye(sender: NodeId, namespace: Namespace) -> Message:
    return Message(MessageKind.GOODBYE, sender, namespace)


def model_request(sender: NodeId, namespace: Namespace) -> Message:
    return Message(MessageKind.MODEL_REQUEST, sender, namespace)


def model_spec(sender: NodeId, namespace: Namespace, spec: ModelSpec) -> Message:
    return Message(MessageKind.MODEL_SPEC, sender, namespace, spec)


def weights(sender: NodeId, namespace: Namespace, params: ParameterSet) -> Message:
    if params.origin != sender:
        params = params.with_metadata(origin=sender)
    return Message(MessageKind.WEIGHTS, sender, namespace, params)


# ---------------------------------------------------------------------------
# encoding

def _encode_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > _MAX_U16:
        raise EncodeError(f"entry name exceeds {_MAX_U16} bytes")
    return _U16.pack(len(raw)) + raw


def _encode_layout_entry(name: str, dtype: Dtype, shape: tuple) -> bytes:
    out = [_encode_name(name), _U8.pack(_DTYPE_TO_BYTE[dtype]), _U8.pack(len(shape))]
    for dim in shape:
        if dim > _MAX_U32:
            raise BodyTooLarge("tensor dimension exceeds u32 range")
        out.append(_U32.pack(dim))
    return b"".join(out)


def _encode_body(m: Message) -> bytes:
    if m.kind in _EMPTY_BODY_KINDS:
        return b""
    if m.kind is MessageKind.ANNOUNCE:
        addr = m.body.address.encode("utf-8")
        if len(addr) > _MAX_U16:
            raise EncodeError("listen address too long")
        return _U8.pack(_MODE_TO_BYTE[m.body.mode]) + _U16.pack(len(addr)) + addr
    if m.kind is MessageKind.MODEL_SPEC:
        out = [_U16.pack(len(m.body.layout))]
        out += [_encode_layout_entry(n, d, s) for n, d, s in m.body.layout]
        return b"".join(out)
    if m.kind is MessageKind.WEIGHTS:
        ps = m.body
        if ps.round > _MAX_U64 or ps.sample_count > _MAX_U64:
            raise BodyTooLarge("round or sample_count exceeds u64 range")
        if len(ps) > _MAX_U16:
            raise BodyTooLarge("too many entries")
        out = [_U64.pack(ps.round), _U64.pack(ps.sample_count), _U16.pack(len(ps))]
        for name, tensor in ps.items():
            out.append(_encode_layout_entry(name, tensor.dtype, tensor.shape))
            out.append(tensor.tobytes())
        return b"".join(out)
    raise EncodeError(f"unencodable kind {m.kind!r}")  # pragma: no cover


def encode_message(m: Message) -> bytes:
    """Serialize a message to one frame. Deterministic: equal messages
    produce identical bytes."""
    ns_raw = m.namespace.name.encode("utf-8")
    if not 1 <= len(ns_raw) <= MAX_NAMESPACE_BYTES:
        raise InvalidNamespace("namespace must be 1..255 UTF-8 bytes")
    payload = _encode_body(m)
    if len(payload) > _MAX_U32:
        raise BodyTooLarge(f"payload is {len(payload)} bytes, limit {_MAX_U32}")
    return b"".join(
        [
            MAGIC,
            _U8.pack(VERSION),
            _U8.pack(int(m.kind)),
            m.sender.value,
            _U8.pack(len(ns_raw)),
            ns_raw,
            _U32.pack(len(payload)),
            payload,
        ]
    )


# ---------------------------------------------------------------------------
# decoding

class _Reader:
    """Bounded cursor over a byte buffer; never reads past the end."""

    __slots__ = ("buf", "pos", "end")

    def __init__(self, buf: bytes, start: int = 0, end: Optional[int] = None):
        self.buf = buf
        self.pos = start
        self.end = len(buf) if end is None else end

    def remaining(self) -> int:
        return self.end - self.pos

    def take(self, n: int, err=TruncatedFrame) -> bytes:
        if self.remaining() < n:
            raise err(f"needed {n} bytes, {self.remaining()} left")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self, err=TruncatedFrame) -> int:
        return self.take(1, err)[0]

    def u16(self, err=TruncatedFrame) -> int:
        return _U16.unpack(self.take(2, err))[0]

    def u32(self, err=TruncatedFrame) -> int:
        return _U32.unpack(self.take(4, err))[0]

    def u64(self, err=TruncatedFrame) -> int:
        return _U64.unpack(self.take(8, err))[0]


def _decode_utf8(raw: bytes, what: str) -> str:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise MalformedPayload(f"{what} is not valid UTF-8") from e


def _decode_layout_entry(r: _Reader):
    name = _decode_utf8(r.take(r.u16(MalformedPayload), MalformedPayload), "entry name")
    dtype_byte = r.u8(MalformedPayload)
    if dtype_byte not in _BYTE_TO_DTYPE:
        raise MalformedPayload(f"unknown dtype byte {dtype_byte}")
    ndim = r.u8(MalformedPayload)
    if ndim > MAX_TENSOR_NDIM:
        raise MalformedPayload(f"tensor rank {ndim} exceeds {MAX_TENSOR_NDIM}")
    shape = tuple(r.u32(MalformedPayload) for _ in range(ndim))
    if any(d < 1 for d in shape):
        raise MalformedPayload("tensor dimension of zero")
    return name, _BYTE_TO_DTYPE[dtype_byte], shape


def _decode_body(kind: MessageKind, r: _Reader) -> Body:
    if kind in _EMPTY_BODY_KINDS:
        if r.remaining():
            raise MalformedPayload(f"{kind.name} payload must be empty")
        return None
    if kind is MessageKind.ANNOUNCE:
        mode_byte = r.u8(MalformedPayload)
        if mode_byte not in _BYTE_TO_MODE:
            raise MalformedPayload(f"unknown sharing mode byte {mode_byte}")
        addr = _decode_utf8(r.take(r.u16(MalformedPayload), MalformedPayload), "address")
        return Announce(_BYTE_TO_MODE[mode_byte], addr)
    if kind is MessageKind.MODEL_SPEC:
        count = r.u16(MalformedPayload)
        try:
            return ModelSpec(tuple(_decode_layout_entry(r) for _ in range(count)))
        except ValueError as e:
            raise MalformedPayload(str(e)) from e
    if kind is MessageKind.WEIGHTS:
        rnd = r.u64(MalformedPayload)
        sample_count = r.u64(MalformedPayload)
        count = r.u16(MalformedPayload)
        entries = []
        seen = set()
        for _ in range(count):
            name, dtype, shape = _decode_layout_entry(r)
            if name in seen:
                raise MalformedPayload(f"duplicate entry name {name!r}")
            seen.add(name)
            nelem = 1
            for d in shape:
                nelem *= d
            raw = r.take(nelem * dtype.itemsize, MalformedPayload)
            data = np.frombuffer(raw, dtype=dtype.np_dtype)
            entries.append((name, Tensor(dtype, shape, data)))
        return ParameterSet(entries, round=rnd, sample_count=sample_count)
    raise UnknownKind(f"kind {kind}")  # pragma: no cover


def decode_message(buf: bytes) -> Message:
    """Parse one frame. Inverse of encode_message on its image; rejects
    everything else with a typed DecodeError."""
    buf = bytes(buf)
    if len(buf) < 6:
        raise TruncatedFrame(f"frame is {len(buf)} bytes, header needs 6")
    if buf[:4] != MAGIC:
        raise BadMagic(f"bad magic {buf[:4]!r}")
    version = buf[4]
    if version != VERSION:
        raise UnsupportedVersion(f"version {version}, supported {VERSION}")
    kind_byte = buf[5]
    try:
        kind = MessageKind(kind_byte)
    except ValueError:
        raise UnknownKind(f"unknown kind byte {kind_byte:#04x}") from None
    r = _Reader(buf, 6)
    sender = NodeId(r.take(NODE_ID_LEN))
    ns_len = r.u8()
    ns_raw = r.take(ns_len)
    if ns_len == 0:
        raise MalformedPayload("empty namespace")
    try:
        namespace = Namespace(_decode_utf8(ns_raw, "namespace"))
    except ValueError as e:
        raise MalformedPayload(str(e)) from e
    paylen = r.u32()
    if r.remaining() < paylen:
        raise TruncatedFrame(f"payload declares {paylen} bytes, {r.remaining()} present")
    if r.remaining() > paylen:
        raise MalformedPayload(f"{r.remaining() - paylen} trailing bytes after payload")
    body_reader = _Reader(buf, r.pos, r.pos + paylen)
    body = _decode_body(kind, body_reader)
    if body_reader.remaining():
        raise MalformedPayload(f"{body_reader.remaining()} unread payload bytes")
    # WEIGHTS carries no origin field; callers stamp it from the envelope.
    if kind is MessageKind.WEIGHTS:
        body = body.with_metadata(origin=sender)
    return Message(kind, sender, namespace, body)


def read_frame(recv_exact) -> bytes:
    """Assemble one frame from a stream.

    `recv_exact(n)` must return exactly n bytes or raise. Returns the raw
    frame bytes; callers pass them to decode_message.
    """
    head = recv_exact(6 + NODE_ID_LEN + 1)
    ns_len = head[-1]
    mid = recv_exact(ns_len + 4)
    paylen = _U32.unpack(mid[-4:])[0]
    payload = recv_exact(paylen) if paylen else b""
    return head + mid + payload
