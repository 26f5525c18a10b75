"""Shared conformance vectors for the wire codec.

Vector files are line-delimited JSON under ``conformance/vectors/``. Each
record is one test case:

    {"name": ..., "frame_hex": ..., "decoded": {...}}   valid frame
    {"name": ..., "frame_hex": ..., "error": "BadMagic"}  rejected frame

``decoded`` is the canonical description of a message (see ``describe``).
Tensor data appears as hex of the raw little-endian bytes so checks stay
bit-exact across implementations. Any implementation of the protocol must
encode each description to exactly ``frame_hex`` and decode ``frame_hex``
back to exactly ``decoded``; rejected frames must raise the named error.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import Dtype, ModelSpec, Namespace, NodeId, ParameterSet, SharingMode, Tensor
from . import wire
from .wire import Announce, Message, MessageKind

_DTYPES = {"f32": Dtype.F32, "f64": Dtype.F64}

ERROR_NAMES = ("BadMagic", "UnsupportedVersion", "TruncatedFrame", "UnknownKind", "MalformedPayload")


def describe(m: Message) -> dict:
    """Canonical JSON-friendly description of a decoded message."""
    out = {
        "kind": m.kind.name,
        "sender": m.sender.hex,
        "namespace": m.namespace.name,
        "body": None,
    }
    if m.kind is MessageKind.ANNOUNCE:
        out["body"] = {"mode": m.body.mode.value, "address": m.body.address}
    elif m.kind is MessageKind.MODEL_SPEC:
        out["body"] = {
            "layout": [
                {"name": n, "dtype": d.value, "shape": list(s)} for n, d, s in m.body.layout
            ]
        }
    elif m.kind is MessageKind.WEIGHTS:
        out["body"] = {
            "round": m.body.round,
            "sample_count": m.body.sample_count,
            "entries": [
                {
                    "name": name,
                    "dtype": t.dtype.value,
                    "shape": list(t.shape),
                    "data_hex": t.tobytes().hex(),
                }
                for name, t in m.body.items()
            ],
        }
    return out


def message_from_description(d: dict) -> Message:
    """Inverse of describe."""
    kind = MessageKind[d["kind"]]
    sender = NodeId.from_hex(d["sender"])
    namespace = Namespace(d["namespace"])
    body = d.get("body")
    if kind is MessageKind.ANNOUNCE:
        parsed = Announce(SharingMode(body["mode"]), body["address"])
    elif kind is MessageKind.MODEL_SPEC:
        parsed = ModelSpec(
            tuple((e["name"], _DTYPES[e["dtype"]], tuple(e["shape"])) for e in body["layout"])
        )
    elif kind is MessageKind.WEIGHTS:
        entries = []
        for e in body["entries"]:
            dtype = _DTYPES[e["dtype"]]
            data = np.frombuffer(bytes.fromhex(e["data_hex"]), dtype=dtype.np_dtype)
            entries.append((e["name"], Tensor(dtype, tuple(e["shape"]), data)))
        parsed = ParameterSet(
            entries, round=body["round"], sample_count=body["sample_count"], origin=sender
        )
    else:
        parsed = None
    return Message(kind, sender, namespace, parsed)


# ---------------------------------------------------------------------------
# randomized message generation (property tests and vector production)

_NAMESPACE_POOL = ["A", "MyNetwork", "lab-7", "münchen", "研究", "x" * 255]
_NAME_POOL = ["w", "b", "w1", "b1", "w2", "b2", "layer.0.weight", "θ", ""]


def random_tensor(rng: np.random.Generator) -> Tensor:
    dtype = Dtype.F32 if rng.random() < 0.5 else Dtype.F64
    ndim = int(rng.integers(0, 4))
    shape = tuple(int(rng.integers(1, 5)) for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = rng.normal(size=count).astype(dtype.np_dtype)
    return Tensor(dtype, shape, data)


def random_parameter_set(rng: np.random.Generator, origin: NodeId) -> ParameterSet:
    n_entries = int(rng.integers(0, 5))
    names = list(rng.permutation([f"t{i}" for i in range(8)] + _NAME_POOL[:6]))[:n_entries]
    entries = [(str(name), random_tensor(rng)) for name in names]
    return ParameterSet(
        entries,
        round=int(rng.integers(0, 1 << 48)),
        sample_count=int(rng.integers(0, 1 << 48)),
        origin=origin,
    )


def random_message(rng: np.random.Generator) -> Message:
    kind = MessageKind(int(rng.integers(1, 8)))
    sender = NodeId(rng.bytes(16))
    namespace = Namespace(str(rng.choice(_NAMESPACE_POOL)))
    if kind is MessageKind.ANNOUNCE:
        mode = list(SharingMode)[int(rng.integers(0, 4))]
        addr = f"127.0.0.1:{int(rng.integers(1024, 65536))}"
        body = Announce(mode, addr)
    elif kind is MessageKind.MODEL_SPEC:
        ps = random_parameter_set(rng, sender)
        body = ModelSpec(tuple((n, t.dtype, t.shape) for n, t in ps.items()))
    elif kind is MessageKind.WEIGHTS:
        body = random_parameter_set(rng, sender)
    else:
        body = None
    return Message(kind, sender, namespace, body)


# ---------------------------------------------------------------------------
# vector production

def _valid_vectors() -> list[dict]:
    sid = NodeId(bytes(range(16)))
    ns = Namespace("MyNetwork")
    cases = [
        ("heartbeat_zero_sender", wire.heartbeat(NodeId(bytes(16)), Namespace("A"))),
        ("hello", Message(MessageKind.HELLO, sid, ns)),
        ("model_request", wire.model_request(sid, ns)),
        ("goodbye", wire.goodbye(sid, ns)),
        ("announce_seed", wire.announce(sid, ns, SharingMode.SEED, "10.0.0.1:9000")),
        ("announce_leech", wire.announce(sid, ns, SharingMode.LEECH, "host:1")),
        ("announce_peer", wire.announce(sid, ns, SharingMode.PEER, "127.0.0.1:45000")),
        ("announce_block", wire.announce(sid, ns, SharingMode.BLOCK, "")),
        ("namespace_unicode", wire.heartbeat(sid, Namespace("münchen-研究"))),
        ("namespace_max_len", wire.heartbeat(sid, Namespace("x" * 255))),
        (
            "model_spec_two_entries",
            wire.model_spec(
                sid,
                ns,
                ModelSpec((("w", Dtype.F32, (2, 3)), ("b", Dtype.F64, (3,)))),
            ),
        ),
        ("model_spec_empty", wire.model_spec(sid, ns, ModelSpec(()))),
        (
            "weights_empty_set",
            wire.weights(sid, ns, ParameterSet({}, round=7, sample_count=9, origin=sid)),
        ),
        (
            "weights_single_f32",
            wire.weights(
                sid,
                ns,
                ParameterSet(
                    {"w": Tensor.f32([1.0, 2.0])}, round=3, sample_count=5, origin=sid
                ),
            ),
        ),
        (
            "weights_scalar_tensor",
            wire.weights(
                sid,
                ns,
                ParameterSet(
                    {"bias": Tensor(Dtype.F64, (), [0.5])}, round=1, sample_count=1, origin=sid
                ),
            ),
        ),
    ]
    rng = np.random.default_rng(20240601)
    for i in range(12):
        sender = NodeId(rng.bytes(16))
        cases.append(
            (
                f"weights_random_{i}",
                wire.weights(
                    sender,
                    Namespace(str(rng.choice(_NAMESPACE_POOL))),
                    random_parameter_set(rng, sender),
                ),
            )
        )
    for i in range(6):
        m = random_message(rng)
        cases.append((f"message_random_{i}", m))
    return [
        {
            "name": name,
            "frame_hex": wire.encode_message(m).hex(),
            "decoded": describe(m),
        }
        for name, m in cases
    ]


def _error_vectors() -> list[dict]:
    good = wire.encode_message(
        wire.weights(
            NodeId(bytes(range(16))),
            Namespace("MyNetwork"),
            ParameterSet(
                {"w": Tensor.f32([1.0, 2.0])},
                round=3,
                sample_count=5,
                origin=NodeId(bytes(range(16))),
            ),
        )
    )
    hb = wire.encode_message(wire.heartbeat(NodeId(bytes(16)), Namespace("A")))

    def mut(data: bytes, at: int, value: int) -> bytes:
        out = bytearray(data)
        out[at] = value
        return bytes(out)

    cases = [
        ("empty_buffer", b"", "TruncatedFrame"),
        ("five_bytes", b"SBFL\x01", "TruncatedFrame"),
        ("bad_magic", b"XXXX" + good[4:], "BadMagic"),
        ("magic_case", b"sbfl" + good[4:], "BadMagic"),
        ("bad_version_0", mut(good, 4, 0), "UnsupportedVersion"),
        ("bad_version_2", mut(good, 4, 2), "UnsupportedVersion"),
        ("kind_zero", mut(good, 5, 0), "UnknownKind"),
        ("kind_eight", mut(good, 5, 8), "UnknownKind"),
        ("kind_255", mut(good, 5, 255), "UnknownKind"),
        ("cut_in_sender", good[:14], "TruncatedFrame"),
        ("cut_before_paylen", hb[:24], "TruncatedFrame"),
        ("cut_in_payload", good[:-3], "TruncatedFrame"),
        ("trailing_byte", good + b"\x00", "MalformedPayload"),
        ("heartbeat_with_payload", hb[:-4] + b"\x01\x00\x00\x00" + b"Z", "MalformedPayload"),
        ("empty_namespace", hb[:22] + b"\x00" + hb[23 + 1 :], "MalformedPayload"),
        ("namespace_bad_utf8", hb[:23] + b"\xff" + hb[24:], "MalformedPayload"),
        # inside the WEIGHTS payload: dtype byte 2 does not exist
        ("weights_bad_dtype", mut(good, len(good) - 14, 2), "MalformedPayload"),
        # tensor rank above the cap
        ("weights_rank_9", mut(good, len(good) - 13, 9), "MalformedPayload"),
    ]
    return [{"name": n, "frame_hex": b.hex(), "error": e} for n, b, e in cases]


def generate_vector_files(out_dir) -> list[Path]:
    """Write core.jsonl and errors.jsonl; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fname, records in (("core.jsonl", _valid_vectors()), ("errors.jsonl", _error_vectors())):
        path = out_dir / fname
        with open(path, "w", encoding="utf-8") as f:
            for rec in records:
                f.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
        written.append(path)
    return written


def load_vectors(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
