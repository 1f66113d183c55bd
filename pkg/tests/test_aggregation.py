"""Aggregation tests against an independently coded averaging oracle."""

import math

import numpy as np
import pytest

from fedring.aggregation import AggregationMode, AggregationPolicy, aggregate, check_quorum
from fedring.errors import NonFiniteWeight, QuorumNotMet, ShapeMismatch, ZeroSampleCount
from fedring.protocol import WeightSet

UNIFORM = AggregationPolicy(AggregationMode.UNIFORM_MEAN, min_clients=1)
WEIGHTED = AggregationPolicy(AggregationMode.SAMPLE_WEIGHTED, min_clients=1)


def ws(values, count=1, name="w"):
    return WeightSet.from_arrays({name: np.asarray(values, dtype=float)}, count)


def oracle_sample_weighted(value_lists, counts):
    """Plain-Python sum(n_i * w_i) / sum(n_i), element by element."""
    total = sum(counts)
    out = []
    for j in range(len(value_lists[0])):
        out.append(math.fsum(v[j] * (c / total) for v, c in zip(value_lists, counts)))
    return out


def test_single_submission_identity():
    for policy in (UNIFORM, WEIGHTED):
        sub = ws([0.1, -2.5, 3.75], count=7)
        out = aggregate([sub], policy)
        assert out.entries[0].data.tobytes() == sub.entries[0].data.tobytes()
        assert out.sample_count == 7


def test_uniform_midpoint():
    out = aggregate([ws([1.0, 2.0]), ws([3.0, 4.0])], UNIFORM)
    assert out.entries[0].data.tolist() == [2.0, 3.0]


def test_sample_weighted_paper_counts():
    # Counts 252 and 286 with values 0 and 1; expected value computed by
    # hand: (252*0 + 286*1) / 538.
    out = aggregate([ws([0.0], 252), ws([1.0], 286)], WEIGHTED)
    expected = 286.0 / 538.0
    assert abs(out.entries[0].data[0] - expected) < 1e-15
    assert out.sample_count == 538


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        aggregate([ws([1.0, 2.0]), ws([1.0, 2.0, 3.0])], UNIFORM)


def test_name_mismatch():
    with pytest.raises(ShapeMismatch):
        aggregate([ws([1.0]), ws([1.0], name="v")], UNIFORM)


def test_quorum():
    policy = AggregationPolicy(min_clients=2)
    assert check_quorum(1, policy) is False
    assert check_quorum(2, policy) is True
    assert check_quorum(0, AggregationPolicy(min_clients=1)) is False
    with pytest.raises(QuorumNotMet):
        aggregate([ws([1.0])], AggregationPolicy(min_clients=2))


def test_zero_sample_count():
    with pytest.raises(ZeroSampleCount):
        aggregate([ws([1.0], 0), ws([2.0], 5)], WEIGHTED)


def test_non_finite_rejected():
    bad = WeightSet.from_arrays({"w": np.array([np.nan])}, 1)
    with pytest.raises(NonFiniteWeight):
        aggregate([bad, ws([1.0])], UNIFORM)


def _random_triple(rng):
    shapes = {"a": (3, 2), "b": (5,)}
    subs = []
    for _ in range(3):
        arrays = {
            n: rng.standard_normal(s) * 10.0 ** int(rng.integers(-3, 4))
            for n, s in shapes.items()
        }
        subs.append(WeightSet.from_arrays(arrays, int(rng.integers(1, 500))))
    return subs


def test_sample_weighted_matches_oracle_100_triples():
    rng = np.random.default_rng(424242)
    for _ in range(100):
        subs = _random_triple(rng)
        out = aggregate(subs, WEIGHTED)
        counts = [s.sample_count for s in subs]
        for j, ref in enumerate(out.entries):
            expected = oracle_sample_weighted(
                [s.entries[j].data for s in subs], counts
            )
            np.testing.assert_allclose(ref.data, expected, rtol=0, atol=1e-12)


def test_permutation_invariance():
    rng = np.random.default_rng(5150)
    for _ in range(100):
        subs = _random_triple(rng)
        for policy in (UNIFORM, WEIGHTED):
            base = aggregate(subs, policy)
            flipped = aggregate(subs[::-1], policy)
            rotated = aggregate(subs[1:] + subs[:1], policy)
            for a, b, c in zip(base.entries, flipped.entries, rotated.entries):
                np.testing.assert_allclose(b.data, a.data, rtol=0, atol=1e-12)
                np.testing.assert_allclose(c.data, a.data, rtol=0, atol=1e-12)


def test_convex_hull_containment():
    rng = np.random.default_rng(90125)
    for _ in range(100):
        subs = _random_triple(rng)
        for policy in (UNIFORM, WEIGHTED):
            out = aggregate(subs, policy)
            for j, entry in enumerate(out.entries):
                stack = np.stack([s.entries[j].data for s in subs])
                slack = 1e-12 * (1.0 + np.abs(stack).max())
                assert (entry.data >= stack.min(axis=0) - slack).all()
                assert (entry.data <= stack.max(axis=0) + slack).all()


def test_idempotent_on_replicas():
    rng = np.random.default_rng(8080)
    sub = WeightSet.from_arrays({"w": rng.standard_normal(64)}, 10)
    for k in (2, 3, 5):
        out = aggregate([sub] * k, UNIFORM)
        diff = np.abs(out.entries[0].data - sub.entries[0].data)
        assert (diff <= np.spacing(np.abs(sub.entries[0].data))).all()


def test_equal_counts_equals_uniform_exactly():
    rng = np.random.default_rng(606)
    subs = [
        WeightSet.from_arrays({"w": rng.standard_normal(32)}, 17) for _ in range(3)
    ]
    uni = aggregate(subs, UNIFORM)
    wtd = aggregate(subs, WEIGHTED)
    assert uni.entries[0].data.tobytes() == wtd.entries[0].data.tobytes()


def test_scaling_linearity():
    rng = np.random.default_rng(1999)
    subs = _random_triple(rng)

    def scaled(alpha):
        return [
            WeightSet.from_arrays(
                {e.name: e.reshaped() * alpha for e in s.entries}, s.sample_count
            )
            for s in subs
        ]

    base = aggregate(subs, UNIFORM)
    # Powers of two scale exactly in binary floating point.
    for alpha in (0.5, 2.0, 4.0):
        out = aggregate(scaled(alpha), UNIFORM)
        for a, b in zip(out.entries, base.entries):
            assert a.data.tobytes() == (b.data * alpha).tobytes()
    out = aggregate(scaled(3.7), UNIFORM)
    for a, b in zip(out.entries, base.entries):
        np.testing.assert_allclose(a.data, b.data * 3.7, rtol=1e-12)
