import numpy as np
import pytest

from meshfed.core import (
    Dtype,
    NodeId,
    ParameterSet,
    SpecMismatch,
    Tensor,
    l2_distance,
    spec_of,
)
from meshfed.aggregation import (
    EmptyInput,
    FedAvg,
    NoisePolicy,
    NonPositiveWeight,
    UniformMean,
    add_noise,
    fedavg,
    strategy_by_name,
    uniform_mean,
)


def nid(i):
    return NodeId(bytes([i] * 16))


def ps(values, i=1, round=0, samples=0, dtype="f64"):
    t = Tensor.f64(values) if dtype == "f64" else Tensor.f32(values)
    return ParameterSet({"w": t}, round=round, sample_count=samples, origin=nid(i))


class TestFedavg:
    def test_identical_inputs_any_weights(self):
        a, b = ps([1.0, -2.0], i=1), ps([1.0, -2.0], i=2)
        out = fedavg([(a, 1.0), (b, 7.0)])
        assert np.array_equal(out.flat(), [1.0, -2.0])

    def test_hand_computed_weighted_mean(self):
        out = fedavg([(ps([0.0], i=1), 1.0), (ps([2.0], i=2), 3.0)])
        assert out.flat()[0] == pytest.approx(1.5)  # (0*1 + 2*3) / 4

    def test_single_input_unchanged(self):
        a = ps([0.5, 1.5], i=1, round=4, samples=10)
        out = fedavg([(a, 2.0)])
        assert np.array_equal(out.flat(), a.flat())
        assert out.round == 4 and out.sample_count == 10

    def test_metadata_rules(self):
        out = fedavg([(ps([0.0], i=1, round=3, samples=5), 1.0),
                      (ps([1.0], i=2, round=9, samples=7), 1.0)])
        assert out.round == 9
        assert out.sample_count == 12
        assert out.origin == nid(1)  # first input's origin

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            fedavg([])

    def test_non_positive_weight(self):
        with pytest.raises(NonPositiveWeight):
            fedavg([(ps([0.0]), 0.0)])
        with pytest.raises(NonPositiveWeight):
            fedavg([(ps([0.0]), -1.0)])

    def test_spec_mismatch(self):
        a = ps([0.0, 1.0], i=1)
        b = ParameterSet({"v": Tensor.f64([0.0, 1.0])}, origin=nid(2))
        with pytest.raises(SpecMismatch):
            fedavg([(a, 1.0), (b, 1.0)])

    def test_f32_entries_round_back_to_f32(self):
        a = ps([1.0], i=1, dtype="f32")
        b = ps([2.0], i=2, dtype="f32")
        out = fedavg([(a, 1.0), (b, 1.0)])
        assert spec_of(out).layout[0][1] is Dtype.F32

    def test_convex_combination_bounds(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            sets = [ps(rng.normal(size=6), i=i + 1) for i in range(4)]
            weights = rng.uniform(0.1, 5.0, size=4)
            out = fedavg(list(zip(sets, weights)))
            lo = np.min([s.flat() for s in sets], axis=0)
            hi = np.max([s.flat() for s in sets], axis=0)
            assert np.all(out.flat() >= lo - 1e-12)
            assert np.all(out.flat() <= hi + 1e-12)

    def test_permutation_invariance_bitexact(self):
        rng = np.random.default_rng(4)
        sets = [ps(rng.normal(size=8), i=i + 1) for i in range(5)]
        weights = list(rng.uniform(0.5, 2.0, size=5))
        pairs = list(zip(sets, weights))
        ref = fedavg(pairs).flat()
        for _ in range(10):
            perm = rng.permutation(5)
            shuffled = [pairs[j] for j in perm]
            out = fedavg(shuffled)
            assert np.array_equal(out.flat(), ref)

    def test_epsilon_weight_approaches_first_input(self):
        a, b = ps([1.0, 1.0], i=1), ps([-1.0, 5.0], i=2)
        out = fedavg([(a, 1.0), (b, 1e-9)])
        assert l2_distance(out, a.with_metadata(round=out.round, sample_count=out.sample_count)) < 1e-6


class TestUniformMean:
    def test_midpoint(self):
        out = uniform_mean([ps([0.0], i=1), ps([2.0], i=2)])
        assert out.flat()[0] == pytest.approx(1.0)

    def test_equals_fedavg_with_unit_weights(self):
        rng = np.random.default_rng(5)
        sets = [ps(rng.normal(size=4), i=i + 1) for i in range(3)]
        a = uniform_mean(sets)
        b = fedavg([(s, 1.0) for s in sets])
        assert np.array_equal(a.flat(), b.flat())

    def test_empty(self):
        with pytest.raises(EmptyInput):
            uniform_mean([])


class TestStrategies:
    def test_lookup_by_name(self):
        assert isinstance(strategy_by_name("fedavg"), FedAvg)
        assert isinstance(strategy_by_name("mean"), UniformMean)
        with pytest.raises(Exception):
            strategy_by_name("median")

    def test_fedavg_strategy_weights_by_sample_count(self):
        local = ps([0.0], i=1, samples=1)
        inbound = [ps([2.0], i=2, samples=3)]
        out = FedAvg().combine(local, inbound)
        assert out.flat()[0] == pytest.approx(1.5)
        assert out.sample_count == 4
        assert out.origin == nid(1)

    def test_fedavg_strategy_drops_zero_sample_inputs(self):
        local = ps([0.0], i=1, samples=0)
        inbound = [ps([2.0], i=2, samples=10)]
        out = FedAvg().combine(local, inbound)
        assert out.flat()[0] == pytest.approx(2.0)

    def test_fedavg_strategy_all_zero_falls_back_to_uniform(self):
        local = ps([0.0], i=1, samples=0)
        inbound = [ps([2.0], i=2, samples=0)]
        out = FedAvg().combine(local, inbound)
        assert out.flat()[0] == pytest.approx(1.0)

    def test_output_spec_matches_local(self):
        rng = np.random.default_rng(6)
        local = ParameterSet(
            [("a", Tensor.f32(rng.normal(size=4), shape=(2, 2))), ("b", Tensor.f64([1.0]))],
            sample_count=2,
            origin=nid(1),
        )
        inbound = [
            ParameterSet(
                [("a", Tensor.f32(rng.normal(size=4), shape=(2, 2))), ("b", Tensor.f64([2.0]))],
                sample_count=5,
                origin=nid(2),
            )
        ]
        for strat in (FedAvg(), UniformMean()):
            out = strat.combine(local, inbound)
            assert spec_of(out).layout == spec_of(local).layout

    def test_round_is_max_of_inputs(self):
        local = ps([0.0], i=1, round=2, samples=1)
        inbound = [ps([1.0], i=2, round=8, samples=1)]
        for strat in (FedAvg(), UniformMean()):
            assert strat.combine(local, inbound).round == 8


class TestNoise:
    def test_sigma_zero_is_bit_identical(self):
        p = ps([1.0, 2.0, 3.0], i=1, round=5)
        out = add_noise(p, NoisePolicy(sigma=0.0, rng_seed=42))
        assert out is p

    def test_deterministic_for_same_inputs(self):
        p = ps(list(range(10)), i=1, round=5)
        pol = NoisePolicy(sigma=0.5, rng_seed=7)
        a, b = add_noise(p, pol), add_noise(p, pol)
        assert np.array_equal(a.flat(), b.flat())

    def test_different_rounds_draw_differently(self):
        pol = NoisePolicy(sigma=0.5, rng_seed=7)
        a = add_noise(ps([0.0] * 4, i=1, round=1), pol)
        b = add_noise(ps([0.0] * 4, i=1, round=2), pol)
        assert not np.array_equal(a.flat(), b.flat())

    def test_different_origins_draw_differently(self):
        pol = NoisePolicy(sigma=0.5, rng_seed=7)
        a = add_noise(ps([0.0] * 4, i=1), pol)
        b = add_noise(ps([0.0] * 4, i=2), pol)
        assert not np.array_equal(a.flat(), b.flat())

    def test_sample_std_matches_sigma(self):
        p = ParameterSet(
            {"w": Tensor.f64(np.zeros(10_000))}, round=3, sample_count=1, origin=nid(1)
        )
        out = add_noise(p, NoisePolicy(sigma=0.1, rng_seed=123))
        observed = float(np.std(out.flat() - p.flat()))
        assert 0.08 <= observed <= 0.12

    def test_metadata_unchanged(self):
        p = ps([1.0], i=3, round=9, samples=17)
        out = add_noise(p, NoisePolicy(sigma=0.2, rng_seed=1))
        assert (out.round, out.sample_count, out.origin) == (9, 17, nid(3))

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            NoisePolicy(sigma=-0.1)
