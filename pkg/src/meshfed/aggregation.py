"""Strategies for combining inbound parameter sets with the local one.

All strategies accumulate in float64 with the summation order fixed by
sorted origin id, so the same multiset of inputs gives bit-identical output
on every node and every run. Results are rounded back to each entry's own
dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ParameterSet, SpecMismatch, Tensor, conforms, spec_of


class AggregationError(ValueError):
    pass


class EmptyInput(AggregationError):
    pass


class NonPositiveWeight(AggregationError):
    pass


def _weighted_average(inputs: list) -> ParameterSet:
    """Core weighted mean over (ParameterSet, weight) pairs.

    Callers have validated weights. Summation runs in input order; sort
    before calling for cross-node determinism.
    """
    base = inputs[0][0]
    spec = spec_of(base)
    total = 0.0
    acc = [np.zeros(t.element_count, dtype=np.float64) for t in base.entries.values()]
    for ps, w in inputs:
        if not conforms(ps, spec):
            raise SpecMismatch("aggregation inputs must share one layout")
        w = float(w)
        total += w
        for buf, tensor in zip(acc, ps.entries.values()):
            buf += w * tensor.data.astype(np.float64)
    entries = []
    for (name, dtype, shape), buf in zip(spec.layout, acc):
        entries.append((name, Tensor(dtype, shape, buf / total)))
    return ParameterSet(
        entries,
        round=max(ps.round for ps, _ in inputs),
        sample_count=sum(ps.sample_count for ps, _ in inputs),
        origin=base.origin,
    )


def _sorted_by_origin(inputs: list) -> list:
    return sorted(inputs, key=lambda pair: pair[0].origin.value)


def fedavg(inputs: list) -> ParameterSet:
    """Weighted federated average over (ParameterSet, weight) pairs.

    Every element of the result is sum(w_i * x_i) / sum(w_i), computed in
    float64 regardless of entry dtype. Output round is the max input round,
    sample_count the sum of input sample counts, origin the first input's
    origin (callers put the local set first).
    """
    if not inputs:
        raise EmptyInput("fedavg needs at least one input")
    for _, w in inputs:
        if not w > 0:
            raise NonPositiveWeight(f"weight {w!r} must be positive")
    origin = inputs[0][0].origin
    out = _weighted_average(_sorted_by_origin(inputs))
    return out.with_metadata(origin=origin)


def uniform_mean(inputs: list) -> ParameterSet:
    """fedavg with every weight equal to 1; sample_count keeps the first
    input's value (there is no meaningful sum for unweighted pooling)."""
    if not inputs:
        raise EmptyInput("uniform_mean needs at least one input")
    first = inputs[0]
    out = fedavg([(ps, 1.0) for ps in inputs])
    return out.with_metadata(sample_count=first.sample_count)


class AggregationStrategy:
    """Interface: combine the local set with inbound ones. Implementations
    must be stateless."""

    name = "base"

    def combine(self, local: ParameterSet, inbound: list) -> ParameterSet:
        raise NotImplementedError


class FedAvg(AggregationStrategy):
    """Sample-count-weighted averaging.

    Inputs with zero sample_count carry no data and are dropped from the
    average (their metadata still counts toward the output sample_count);
    if every input reports zero samples the strategy falls back to equal
    weights so a data-less community still pools.
    """

    name = "fedavg"

    def combine(self, local: ParameterSet, inbound: list) -> ParameterSet:
        everyone = [local] + list(inbound)
        weighted = [(ps, ps.sample_count) for ps in everyone if ps.sample_count > 0]
        if not weighted:
            weighted = [(ps, 1.0) for ps in everyone]
        out = _weighted_average(_sorted_by_origin(weighted))
        return out.with_metadata(
            round=max(ps.round for ps in everyone),
            sample_count=sum(ps.sample_count for ps in everyone),
            origin=local.origin,
        )


class UniformMean(AggregationStrategy):
    """Equal-weight averaging; output keeps the local sample_count."""

    name = "mean"

    def combine(self, local: ParameterSet, inbound: list) -> ParameterSet:
        everyone = [local] + list(inbound)
        out = _weighted_average(_sorted_by_origin([(ps, 1.0) for ps in everyone]))
        return out.with_metadata(
            round=max(ps.round for ps in everyone),
            sample_count=local.sample_count,
            origin=local.origin,
        )


STRATEGIES = {cls.name: cls for cls in (FedAvg, UniformMean)}


def strategy_by_name(name: str) -> AggregationStrategy:
    try:
        return STRATEGIES[name]()
    except KeyError:
        raise AggregationError(
            f"unknown aggregation strategy {name!r}; known: {sorted(STRATEGIES)}"
        ) from None


@dataclass(frozen=True)
class NoisePolicy:
    """Zero-mean Gaussian perturbation applied to weights before they are
    transmitted. sigma 0 disables it exactly."""

    sigma: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


def add_noise(ps: ParameterSet, policy: NoisePolicy) -> ParameterSet:
    """Add per-element N(0, sigma^2) noise, deterministically.

    The generator is seeded by (rng_seed, round, origin), so the same set
    under the same policy always yields the same perturbation, while
    successive rounds and different origins draw independently.
    """
    if policy.sigma == 0.0:
        return ps
    seed_material = [policy.rng_seed & 0xFFFFFFFF, ps.round] + [
        int.from_bytes(ps.origin.value[i : i + 4], "little") for i in (0, 4, 8, 12)
    ]
    rng = np.random.default_rng(seed_material)
    entries = []
    for name, tensor in ps.items():
        noise = rng.normal(0.0, policy.sigma, size=tensor.element_count)
        entries.append((name, tensor.with_data(tensor.data.astype(np.float64) + noise)))
    return ps.with_entries(entries)
