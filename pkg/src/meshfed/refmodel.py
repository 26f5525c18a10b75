"""Native reference trainers and synthetic data.

Linear regression and a one-hidden-layer tanh MLP, both trained by
mini-batch gradient descent on mean squared error with analytic gradients.
Datasets are generated as y = X @ w_true + noise and are always
regenerable from their seed; a delimited-text export exists for debugging.

All tensors are float64. samples_used reported by train() counts distinct
local samples, not samples times epochs, so federated weighting reflects
data volume rather than compute volume.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import Dtype, ParameterSet, SpecMismatch, Tensor
from .node import TrainerContract, TrainResult


class DataError(ValueError):
    pass


class BadRatios(DataError):
    pass


class TooManyShards(DataError):
    pass


class EmptyShard(DataError):
    pass


@dataclass
class SyntheticDataset:
    X: np.ndarray
    y: np.ndarray
    seed: int
    true_weights: np.ndarray
    noise_std: float

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


@dataclass
class Shard:
    X: np.ndarray
    y: np.ndarray

    @property
    def size(self) -> int:
        return self.X.shape[0]


def gen_dataset(seed: int, n: int, d: int, noise_std: float = 0.0, w_seed=None) -> SyntheticDataset:
    """Deterministic regression dataset.

    X entries are standard normal; y = X @ w_true + N(0, noise_std^2).
    w_true is drawn from w_seed when given, so several nodes can hold
    private data from one shared ground truth.
    """
    if n < 1 or d < 1:
        raise DataError("n and d must be >= 1")
    if noise_std < 0:
        raise DataError("noise_std must be non-negative")
    w_rng = np.random.default_rng([17, seed if w_seed is None else w_seed])
    w_true = w_rng.normal(size=d)
    rng = np.random.default_rng([23, seed])
    X = rng.normal(size=(n, d))
    y = X @ w_true + (rng.normal(size=n) * noise_std if noise_std > 0 else 0.0)
    return SyntheticDataset(X=X, y=np.asarray(y, dtype=np.float64), seed=seed,
                            true_weights=w_true, noise_std=noise_std)


@dataclass(frozen=True)
class PartitionScheme:
    """iid: uniform shuffle split into near-equal shards.
    quantity_skew: shard sizes follow `ratios` within one sample.
    feature_skew: samples ordered by their first feature, blended with a
    random order; alpha 1 is fully sorted, alpha 0 is fully random.
    """

    kind: str = "iid"
    ratios: Optional[tuple] = None
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in ("iid", "quantity_skew", "feature_skew"):
            raise DataError(f"unknown partition scheme {self.kind!r}")
        if self.kind == "quantity_skew":
            if not self.ratios:
                raise BadRatios("quantity_skew needs ratios")
            if abs(sum(self.ratios) - 1.0) > 1e-9:
                raise BadRatios(f"ratios sum to {sum(self.ratios)}, expected 1")
            if any(r < 0 for r in self.ratios):
                raise BadRatios("ratios must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise DataError("alpha must lie in [0, 1]")


def _split_sizes(n: int, k: int) -> list:
    base, extra = divmod(n, k)
    return [base + (1 if i < extra else 0) for i in range(k)]


def _skew_sizes(n: int, ratios) -> list:
    raw = [r * n for r in ratios]
    sizes = [int(x) for x in raw]
    remainder = n - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda i: raw[i] - sizes[i], reverse=True)
    for i in order[:remainder]:
        sizes[i] += 1
    return sizes


def partition(ds: SyntheticDataset, k: int, scheme: PartitionScheme, seed: int) -> list:
    """Split the dataset into k disjoint shards covering it exactly."""
    if k < 1:
        raise DataError("k must be >= 1")
    if scheme.kind == "iid":
        if k > ds.n:
            raise TooManyShards(f"{k} shards over {ds.n} samples leaves some empty")
        order = np.random.default_rng([29, seed]).permutation(ds.n)
        sizes = _split_sizes(ds.n, k)
    elif scheme.kind == "quantity_skew":
        if len(scheme.ratios) != k:
            raise BadRatios(f"{len(scheme.ratios)} ratios for {k} shards")
        order = np.random.default_rng([29, seed]).permutation(ds.n)
        sizes = _skew_sizes(ds.n, scheme.ratios)
    else:  # feature_skew
        if k > ds.n:
            raise TooManyShards(f"{k} shards over {ds.n} samples leaves some empty")
        rng = np.random.default_rng([29, seed])
        ranks = np.argsort(np.argsort(ds.X[:, 0])) / max(ds.n - 1, 1)
        score = scheme.alpha * ranks + (1.0 - scheme.alpha) * rng.random(ds.n)
        order = np.argsort(score, kind="stable")
        sizes = _split_sizes(ds.n, k)
    shards = []
    at = 0
    for size in sizes:
        idx = order[at : at + size]
        shards.append(Shard(X=ds.X[idx].copy(), y=ds.y[idx].copy()))
        at += size
    return shards


def export_delimited(ds: SyntheticDataset, path):
    """Debug export: one row per sample, features then target."""
    header = ",".join([f"x{i}" for i in range(ds.d)] + ["y"])
    body = np.column_stack([ds.X, ds.y])
    np.savetxt(path, body, delimiter=",", header=header, comments="")


# ---------------------------------------------------------------------------
# losses and gradients

def _require_entries(params: ParameterSet, names) -> list:
    missing = [n for n in names if n not in params.entries]
    if missing:
        raise SpecMismatch(f"parameter set lacks entries {missing}")
    return [params[n].reshaped() for n in names]


def linear_loss(params: ParameterSet, shard: Shard) -> float:
    if shard.size == 0:
        raise EmptyShard("cannot evaluate on an empty shard")
    w, b = _require_entries(params, ["w", "b"])
    if w.shape != (shard.X.shape[1],):
        raise SpecMismatch(f"w has shape {w.shape}, data has {shard.X.shape[1]} features")
    r = shard.X @ w + b[0] - shard.y
    return float(np.mean(r * r))


def linear_gradient(params: ParameterSet, shard: Shard) -> ParameterSet:
    if shard.size == 0:
        raise EmptyShard("cannot differentiate on an empty shard")
    w, b = _require_entries(params, ["w", "b"])
    if w.shape != (shard.X.shape[1],):
        raise SpecMismatch(f"w has shape {w.shape}, data has {shard.X.shape[1]} features")
    m = shard.size
    r = shard.X @ w + b[0] - shard.y
    dw = (2.0 / m) * (shard.X.T @ r)
    db = np.array([(2.0 / m) * np.sum(r)])
    return params.with_entries({"w": params["w"].with_data(dw), "b": params["b"].with_data(db)})


def _mlp_forward(params: ParameterSet, X: np.ndarray):
    w1, b1, w2, b2 = _require_entries(params, ["w1", "b1", "w2", "b2"])
    z = X @ w1 + b1
    a = np.tanh(z)
    yhat = (a @ w2).reshape(-1) + b2[0]
    return yhat, a


def mlp_loss(params: ParameterSet, shard: Shard) -> float:
    if shard.size == 0:
        raise EmptyShard("cannot evaluate on an empty shard")
    yhat, _ = _mlp_forward(params, shard.X)
    r = yhat - shard.y
    return float(np.mean(r * r))


def mlp_gradient(params: ParameterSet, shard: Shard) -> ParameterSet:
    if shard.size == 0:
        raise EmptyShard("cannot differentiate on an empty shard")
    w1, b1, w2, b2 = _require_entries(params, ["w1", "b1", "w2", "b2"])
    m = shard.size
    yhat, a = _mlp_forward(params, shard.X)
    e = (2.0 / m) * (yhat - shard.y)
    dw2 = a.T @ e[:, None]
    db2 = np.array([np.sum(e)])
    da = e[:, None] @ w2.T  # (n, h)
    dz = da * (1.0 - a * a)
    dw1 = shard.X.T @ dz
    db1 = dz.sum(axis=0)
    return params.with_entries(
        {
            "w1": params["w1"].with_data(dw1),
            "b1": params["b1"].with_data(db1),
            "w2": params["w2"].with_data(dw2),
            "b2": params["b2"].with_data(db2),
        }
    )


# ---------------------------------------------------------------------------
# trainers

class _GradientTrainer(TrainerContract):
    """Shared mini-batch descent loop over an analytic-gradient model."""

    def __init__(self, shard: Shard, learning_rate=0.1, local_epochs=1, batch_size=None,
                 init="zeros", init_seed=0, init_scale=0.5, shuffle_seed=0):
        if init not in ("zeros", "random", "absent"):
            raise DataError(f"unknown init {init!r}")
        self.shard = shard
        self.learning_rate = float(learning_rate)
        self.local_epochs = int(local_epochs)
        self.batch_size = batch_size
        self.init = init
        self.init_seed = init_seed
        self.init_scale = float(init_scale)
        self._shuffle_rng = np.random.default_rng([31, shuffle_seed])
        self._visible = shard.size

    # sim harnesses stage data arrival by raising this cap
    def set_visible_samples(self, count: int):
        self._visible = max(0, min(int(count), self.shard.size))

    def local_sample_count(self) -> int:
        return self._visible

    def _visible_shard(self) -> Shard:
        if self._visible == self.shard.size:
            return self.shard
        return Shard(X=self.shard.X[: self._visible], y=self.shard.y[: self._visible])

    def loss(self, params: ParameterSet) -> float:
        raise NotImplementedError

    def gradient(self, params: ParameterSet, shard: Shard) -> ParameterSet:
        raise NotImplementedError

    def _build_params(self) -> ParameterSet:
        raise NotImplementedError

    def initial_params(self) -> Optional[ParameterSet]:
        if self.init == "absent":
            return None
        return self._build_params()

    def train(self, params: ParameterSet) -> TrainResult:
        view = self._visible_shard()
        if view.size == 0:
            raise EmptyShard("train() requires at least one visible sample")
        for _ in range(self.local_epochs):
            if self.batch_size is None or self.batch_size >= view.size:
                grad = self.gradient(params, view)
                params = self._descend(params, grad)
            else:
                order = self._shuffle_rng.permutation(view.size)
                for at in range(0, view.size, self.batch_size):
                    idx = order[at : at + self.batch_size]
                    batch = Shard(X=view.X[idx], y=view.y[idx])
                    params = self._descend(params, self.gradient(params, batch))
        return TrainResult(params=params, samples_used=view.size, loss=self.loss(params))

    def _descend(self, params: ParameterSet, grad: ParameterSet) -> ParameterSet:
        lr = self.learning_rate
        return params.with_entries(
            {
                name: t.with_data(t.data.astype(np.float64) - lr * grad[name].data)
                for name, t in params.items()
            }
        )


class LinearTrainer(_GradientTrainer):
    """y = X @ w + b fitted by gradient descent; entries "w" and "b"."""

    def loss(self, params):
        return linear_loss(params, self._visible_shard())

    def gradient(self, params, shard):
        return linear_gradient(params, shard)

    def _build_params(self) -> ParameterSet:
        d = self.shard.X.shape[1]
        if self.init == "zeros":
            w = np.zeros(d)
            b = np.zeros(1)
        else:
            rng = np.random.default_rng([37, self.init_seed])
            w = rng.normal(scale=self.init_scale, size=d)
            b = rng.normal(scale=self.init_scale, size=1)
        return ParameterSet(
            [("w", Tensor(Dtype.F64, (d,), w)), ("b", Tensor(Dtype.F64, (1,), b))]
        )


class MlpTrainer(_GradientTrainer):
    """One tanh hidden layer of width `hidden`; entries w1, b1, w2, b2."""

    def __init__(self, shard, hidden=8, **kwargs):
        kwargs.setdefault("init", "random")
        super().__init__(shard, **kwargs)
        if hidden < 1:
            raise DataError("hidden width must be >= 1")
        self.hidden = int(hidden)

    def loss(self, params):
        return mlp_loss(params, self._visible_shard())

    def gradient(self, params, shard):
        return mlp_gradient(params, shard)

    def _build_params(self) -> ParameterSet:
        d, h = self.shard.X.shape[1], self.hidden
        rng = np.random.default_rng([41, self.init_seed])
        if self.init == "zeros":
            # zero-init never breaks hidden-unit symmetry; keep w2/b2 zero but
            # spread w1 a little
            w1 = rng.normal(scale=1e-3, size=(d, h))
            b1 = np.zeros(h)
            w2 = np.zeros((h, 1))
            b2 = np.zeros(1)
        else:
            w1 = rng.normal(scale=self.init_scale, size=(d, h))
            b1 = rng.normal(scale=self.init_scale, size=h)
            w2 = rng.normal(scale=self.init_scale, size=(h, 1))
            b2 = rng.normal(scale=self.init_scale, size=1)
        return ParameterSet(
            [
                ("w1", Tensor(Dtype.F64, (d, h), w1)),
                ("b1", Tensor(Dtype.F64, (h,), b1)),
                ("w2", Tensor(Dtype.F64, (h, 1), w2)),
                ("b2", Tensor(Dtype.F64, (1,), b2)),
            ]
        )


class StaticTrainer(TrainerContract):
    """Training disabled: parameters pass through untouched. Used for pure
    gossip-averaging runs."""

    def __init__(self, shard: Shard, init="random", init_seed=0, init_scale=1.0):
        self.shard = shard
        self.init = init
        self.init_seed = init_seed
        self.init_scale = init_scale

    def local_sample_count(self) -> int:
        return 0

    def initial_params(self) -> Optional[ParameterSet]:
        if self.init == "absent":
            return None
        d = self.shard.X.shape[1]
        if self.init == "zeros":
            w = np.zeros(d)
            b = np.zeros(1)
        else:
            rng = np.random.default_rng([37, self.init_seed])
            w = rng.normal(scale=self.init_scale, size=d)
            b = rng.normal(scale=self.init_scale, size=1)
        return ParameterSet(
            [("w", Tensor(Dtype.F64, (d,), w)), ("b", Tensor(Dtype.F64, (1,), b))]
        )

    def train(self, params: ParameterSet) -> TrainResult:
        return TrainResult(params=params, samples_used=0, loss=None)


def make_trainer(kind: str, shard: Shard, **kwargs) -> TrainerContract:
    if kind == "linear":
        return LinearTrainer(shard, **kwargs)
    if kind == "mlp":
        return MlpTrainer(shard, **kwargs)
    if kind == "none":
        allowed = {k: v for k, v in kwargs.items() if k in ("init", "init_seed", "init_scale")}
        return StaticTrainer(shard, **allowed)
    raise DataError(f"unknown trainer kind {kind!r}")
