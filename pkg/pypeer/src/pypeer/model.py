"""Local tooling: a numpy linear model built from a downloaded layout,
plus synthetic training data.

The data recipe matches the community convention (y = X @ w_true + noise,
standard-normal X, ground truth drawn from w_seed) so a peer generated
from the same w_seed trains toward the same optimum as everyone else.
"""

from __future__ import annotations

import hashlib

import numpy as np

NP_DTYPES = {"f32": "<f4", "f64": "<f8"}


class ModelShapeError(ValueError):
    pass


def make_data(seed: int, n: int, d: int, noise_std: float, w_seed=None):
    w_rng = np.random.default_rng([17, seed if w_seed is None else w_seed])
    w_true = w_rng.normal(size=d)
    rng = np.random.default_rng([23, seed])
    X = rng.normal(size=(n, d))
    y = X @ w_true + (rng.normal(size=n) * noise_std if noise_std > 0 else 0.0)
    return X, np.asarray(y, dtype=np.float64)


class LinearModel:
    """y = X @ w + b, fitted by full-batch gradient descent."""

    def __init__(self, layout):
        names = [e["name"] for e in layout]
        if names != ["w", "b"]:
            raise ModelShapeError(f"expected entries ['w', 'b'], peer offered {names}")
        w_spec, b_spec = layout
        if len(w_spec["shape"]) != 1:
            raise ModelShapeError(f"w must be rank 1, got shape {w_spec['shape']}")
        if list(b_spec["shape"]) not in ([1], []):
            raise ModelShapeError(f"b must be a single value, got shape {b_spec['shape']}")
        self.layout = [dict(e) for e in layout]
        self.d = int(w_spec["shape"][0])
        self.w = np.zeros(self.d)
        self.b = 0.0

    def load_entries(self, entries):
        """Adopt transmitted values (entries in canonical wire form)."""
        by_name = {e["name"]: e for e in entries}
        if set(by_name) != {"w", "b"}:
            raise ModelShapeError(f"expected w and b, got {sorted(by_name)}")
        for spec, entry in zip(self.layout, [by_name["w"], by_name["b"]]):
            if entry["dtype"] != spec["dtype"] or list(entry["shape"]) != list(spec["shape"]):
                raise ModelShapeError("transmitted entries do not match the adopted layout")
        self.w = np.frombuffer(
            bytes.fromhex(by_name["w"]["data_hex"]), dtype=NP_DTYPES[by_name["w"]["dtype"]]
        ).astype(np.float64)
        self.b = float(
            np.frombuffer(
                bytes.fromhex(by_name["b"]["data_hex"]), dtype=NP_DTYPES[by_name["b"]["dtype"]]
            )[0]
        )

    def dump_entries(self):
        out = []
        for spec, values in zip(self.layout, (self.w, np.array([self.b]))):
            raw = np.asarray(values, dtype=NP_DTYPES[spec["dtype"]]).tobytes()
            out.append({"name": spec["name"], "dtype": spec["dtype"],
                        "shape": list(spec["shape"]), "data_hex": raw.hex()})
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w, [self.b]])

    def set_flat(self, values: np.ndarray):
        self.w = np.asarray(values[: self.d], dtype=np.float64).copy()
        self.b = float(values[self.d])

    def loss(self, X, y) -> float:
        r = X @ self.w + self.b - y
        return float(np.mean(r * r))

    def train_epochs(self, X, y, learning_rate: float, epochs: int) -> float:
        m = X.shape[0]
        for _ in range(epochs):
            r = X @ self.w + self.b - y
            self.w -= learning_rate * (2.0 / m) * (X.T @ r)
            self.b -= learning_rate * (2.0 / m) * float(np.sum(r))
        return self.loss(X, y)

    def digest(self) -> str:
        h = hashlib.sha256()
        for entry in self.dump_entries():
            h.update(entry["name"].encode())
            h.update(entry["dtype"].encode())
            h.update(repr(tuple(entry["shape"])).encode())
            h.update(bytes.fromhex(entry["data_hex"]))
        return h.hexdigest()[:16]


def sample_weighted_mean(flats_and_weights):
    """FedAvg over flat parameter vectors; falls back to equal weights when
    nobody reports samples."""
    total = sum(w for _, w in flats_and_weights)
    if total <= 0:
        flats_and_weights = [(f, 1.0) for f, _ in flats_and_weights]
        total = float(len(flats_and_weights))
    acc = np.zeros_like(flats_and_weights[0][0])
    for flat, weight in flats_and_weights:
        acc += weight * flat
    return acc / total
