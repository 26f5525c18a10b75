"""Shared vocabulary: node identities, namespaces, tensors, parameter sets,
model specs and per-link sharing modes.

Everything in this module is an immutable value after construction and safe
to share across threads.
"""

from __future__ import annotations

import enum
import hashlib
import os
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np

NODE_ID_LEN = 16
MAX_NAMESPACE_BYTES = 255
MAX_TENSOR_NDIM = 8


class SpecMismatch(ValueError):
    """Two parameter sets (or a set and a spec) do not share a layout."""


@dataclass(frozen=True, order=True)
class NodeId:
    """16-byte node identity, stable for the life of a node process."""

    value: bytes

    def __post_init__(self):
        if not isinstance(self.value, bytes) or len(self.value) != NODE_ID_LEN:
            raise ValueError(f"NodeId must be exactly {NODE_ID_LEN} bytes")

    @classmethod
    def generate(cls) -> "NodeId":
        return cls(os.urandom(NODE_ID_LEN))

    @classmethod
    def derived(cls, *parts: str) -> "NodeId":
        """Deterministic id from a string label, for simulations."""
        digest = hashlib.sha256(":".join(parts).encode()).digest()
        return cls(digest[:NODE_ID_LEN])

    @classmethod
    def from_hex(cls, text: str) -> "NodeId":
        return cls(bytes.fromhex(text))

    @property
    def hex(self) -> str:
        return self.value.hex()

    def short(self) -> str:
        return self.value.hex()[:8]

    def __str__(self) -> str:
        return self.hex


@dataclass(frozen=True)
class Namespace:
    """Name of the federated community a node belongs to."""

    name: str

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise ValueError("namespace must be a non-empty string")
        if "\x00" in self.name:
            raise ValueError("namespace must not contain NUL")
        if len(self.name.encode("utf-8")) > MAX_NAMESPACE_BYTES:
            raise ValueError(f"namespace exceeds {MAX_NAMESPACE_BYTES} UTF-8 bytes")

    def __str__(self) -> str:
        return self.name


class Dtype(enum.Enum):
    F32 = "f32"
    F64 = "f64"

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype("<f4") if self is Dtype.F32 else np.dtype("<f8")

    @property
    def itemsize(self) -> int:
        return 4 if self is Dtype.F32 else 8


class Tensor:
    """Dense numeric tensor: dtype, shape, flat row-major data buffer."""

    __slots__ = ("dtype", "shape", "data")

    def __init__(self, dtype: Dtype, shape: Iterable[int], data):
        shape = tuple(int(d) for d in shape)
        if len(shape) > MAX_TENSOR_NDIM:
            raise ValueError(f"tensor rank {len(shape)} exceeds {MAX_TENSOR_NDIM}")
        if any(d < 1 for d in shape):
            raise ValueError("all tensor dimensions must be >= 1")
        arr = np.asarray(data, dtype=dtype.np_dtype).reshape(-1).copy()
        count = 1
        for d in shape:
            count *= d
        if arr.size != count:
            raise ValueError(f"shape {shape} implies {count} elements, got {arr.size}")
        arr.flags.writeable = False
        object.__setattr__(self, "dtype", dtype)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @classmethod
    def f32(cls, data, shape=None) -> "Tensor":
        arr = np.asarray(data, dtype="<f4")
        return cls(Dtype.F32, shape if shape is not None else arr.shape, arr)

    @classmethod
    def f64(cls, data, shape=None) -> "Tensor":
        arr = np.asarray(data, dtype="<f8")
        return cls(Dtype.F64, shape if shape is not None else arr.shape, arr)

    @property
    def element_count(self) -> int:
        return int(self.data.size)

    def reshaped(self) -> np.ndarray:
        """Data viewed at its declared shape (read-only)."""
        return self.data.reshape(self.shape)

    def tobytes(self) -> bytes:
        """Raw little-endian IEEE-754 bytes, row-major."""
        return self.data.astype(self.dtype.np_dtype, copy=False).tobytes()

    def with_data(self, data) -> "Tensor":
        return Tensor(self.dtype, self.shape, data)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.dtype is other.dtype
            and self.shape == other.shape
            and self.tobytes() == other.tobytes()
        )

    def __hash__(self):
        return hash((self.dtype, self.shape, self.tobytes()))

    def __repr__(self) -> str:
        return f"Tensor({self.dtype.value}, shape={list(self.shape)})"


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layout of a parameter set: (name, dtype, shape) per entry."""

    layout: tuple = field(default_factory=tuple)

    def __post_init__(self):
        layout = tuple((str(n), d, tuple(s)) for n, d, s in self.layout)
        names = [n for n, _, _ in layout]
        if len(set(names)) != len(names):
            raise ValueError("duplicate entry names in model spec")
        object.__setattr__(self, "layout", layout)

    def names(self) -> list[str]:
        return [n for n, _, _ in self.layout]

    def __len__(self) -> int:
        return len(self.layout)


class ParameterSet:
    """Ordered, named tensor collection plus round/sample-count metadata.

    The unit of exchange between nodes. Entry iteration order is insertion
    order and is preserved across serialization.
    """

    __slots__ = ("_entries", "round", "sample_count", "origin")

    def __init__(
        self,
        entries: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]],
        round: int = 0,
        sample_count: int = 0,
        origin: NodeId | None = None,
    ):
        if isinstance(entries, Mapping):
            pairs = list(entries.items())
        else:
            pairs = list(entries)
        d: dict[str, Tensor] = {}
        for name, tensor in pairs:
            name = str(name)
            if name in d:
                raise ValueError(f"duplicate entry name {name!r}")
            if not isinstance(tensor, Tensor):
                raise TypeError("entries must map names to Tensor values")
            d[name] = tensor
        if round < 0 or sample_count < 0:
            raise ValueError("round and sample_count must be non-negative")
        object.__setattr__(self, "_entries", MappingProxyType(d))
        object.__setattr__(self, "round", int(round))
        object.__setattr__(self, "sample_count", int(sample_count))
        object.__setattr__(self, "origin", origin if origin is not None else NodeId(bytes(16)))

    def __setattr__(self, name, value):
        raise AttributeError("ParameterSet is immutable")

    @property
    def entries(self) -> Mapping[str, Tensor]:
        return self._entries

    def names(self) -> list[str]:
        return list(self._entries.keys())

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def with_metadata(self, round=None, sample_count=None, origin=None) -> "ParameterSet":
        return ParameterSet(
            self._entries,
            round=self.round if round is None else round,
            sample_count=self.sample_count if sample_count is None else sample_count,
            origin=self.origin if origin is None else origin,
        )

    def with_entries(self, entries) -> "ParameterSet":
        """Same metadata, new tensor values."""
        return ParameterSet(
            entries, round=self.round, sample_count=self.sample_count, origin=self.origin
        )

    def flat(self) -> np.ndarray:
        """All entries concatenated into one float64 vector, in entry order."""
        if not self._entries:
            return np.zeros(0, dtype=np.float64)
        return np.concatenate([t.data.astype(np.float64) for t in self._entries.values()])

    def digest(self) -> str:
        """Short content hash over layout and raw tensor bytes."""
        h = hashlib.sha256()
        for name, tensor in self._entries.items():
            h.update(name.encode())
            h.update(tensor.dtype.value.encode())
            h.update(repr(tensor.shape).encode())
            h.update(tensor.tobytes())
        return h.hexdigest()[:16]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParameterSet):
            return NotImplemented
        return (
            list(self.items()) == list(other.items())
            and self.round == other.round
            and self.sample_count == other.sample_count
            and self.origin == other.origin
        )

    def __repr__(self) -> str:
        return (
            f"ParameterSet({self.names()}, round={self.round}, "
            f"samples={self.sample_count}, origin={self.origin.short()})"
        )


class SharingMode(enum.Enum):
    """Per-link role governing weight exchange permissions."""

    SEED = "seed"
    LEECH = "leech"
    PEER = "peer"
    BLOCK = "block"

    @property
    def may_send(self) -> bool:
        return self in (SharingMode.SEED, SharingMode.PEER)

    @property
    def may_receive(self) -> bool:
        return self in (SharingMode.LEECH, SharingMode.PEER)

    @classmethod
    def parse(cls, text: str) -> "SharingMode":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValueError(f"unknown sharing mode {text!r}") from None

    def __str__(self) -> str:
        return self.value


def spec_of(ps: ParameterSet) -> ModelSpec:
    """Project a parameter set onto its layout, preserving entry order."""
    return ModelSpec(tuple((n, t.dtype, t.shape) for n, t in ps.items()))


def conforms(ps: ParameterSet, spec: ModelSpec) -> bool:
    """True iff the set's layout equals `spec` element-wise, order included."""
    return spec_of(ps).layout == spec.layout


def l2_distance(a: ParameterSet, b: ParameterSet) -> float:
    """Euclidean norm of the element-wise difference across all entries."""
    if not conforms(a, spec_of(b)):
        raise SpecMismatch("parameter sets have different layouts")
    return float(np.linalg.norm(a.flat() - b.flat()))
