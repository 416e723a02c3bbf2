import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scf_rkl.baselines import (
    BaselineConfig,
    dare_linear,
    dare_prune,
    dare_ties,
    elect_sign,
    merge_checkpoint,
    sce_merge,
    task_arithmetic,
    ties_merge,
    trim,
)
from scf_rkl.checkpoint_io import TensorEntry, TensorMap
from scf_rkl.fusion import ShapeMismatchError
from scf_rkl.rng import normal, uniform

from oracles import py_dare, py_sce, py_ties, py_trim

SMALL = st.floats(-8, 8, allow_nan=False).map(lambda x: float(np.float32(x)))


def _deltas(n, k):
    return st.lists(st.lists(SMALL | st.just(0.0), min_size=n, max_size=n),
                    min_size=k, max_size=k)


class TestTaskArithmetic:
    def test_hand_example(self):
        out = task_arithmetic(np.zeros(2), [np.array([2.0, -2.0]), np.array([4.0, 2.0])], 0.5)
        np.testing.assert_array_equal(out, [3.0, 0.0])

    def test_endpoints(self):
        base = normal(1, 9).astype(np.float32).astype(np.float64)
        sec = (base + normal(2, 9)).astype(np.float32).astype(np.float64)
        np.testing.assert_array_equal(task_arithmetic(base, [sec - base], 1.0), sec)
        np.testing.assert_array_equal(task_arithmetic(base, [sec - base], 0.0), base)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            task_arithmetic(np.zeros(2), [np.zeros(3)])


class TestDare:
    def test_zero_drop(self):
        d = normal(3, 10)
        np.testing.assert_array_equal(dare_prune(d, 0.0, 9), d)

    def test_large_sample_mean(self):
        out = dare_prune(np.ones(10 ** 6), 0.5, seed=11)
        assert abs(out.mean() - 1.0) < 0.01
        assert set(np.unique(out)) <= {0.0, 2.0}

    def test_deterministic_and_name_keyed(self):
        d = normal(4, 1000)
        a = dare_prune(d, 0.3, 5, "w")
        assert np.array_equal(a, dare_prune(d, 0.3, 5, "w"))
        assert not np.array_equal(a, dare_prune(d, 0.3, 5, "v"))
        assert not np.array_equal(a, dare_prune(d, 0.3, 6, "w"))

    def test_hand_trace(self):
        d = [0.5, -1.0, 2.0, 0.0, 3.0, -0.25, 1.5, 4.0]
        u = uniform(42, len(d), "dare", "t")
        assert dare_prune(np.array(d), 0.4, 42, "t").tolist() == py_dare(d, 0.4, u)

    def test_expectation_over_seeds(self):
        d = np.array([1.0, -2.0, 0.5, 3.0])
        samples = np.stack([dare_prune(d, 0.5, s) for s in range(1000)])
        # each kept value is d / (1 - p); the sample mean has std |d| / sqrt(1000)
        sigma = np.abs(d) / np.sqrt(1000)
        assert np.all(np.abs(samples.mean(axis=0) - d) <= 3 * sigma)

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            dare_prune(np.ones(2), 1.0, 0)


class TestTies:
    def test_single_dense(self):
        base, delta = np.array([1.0, 2.0]), np.array([0.5, -4.0])
        np.testing.assert_array_equal(ties_merge(base, [delta], 1.0, 1.0), base + delta)

    def test_sign_tie_keeps_base(self):
        out = ties_merge(np.array([7.0]), [np.array([1.0]), np.array([-1.0])], 1.0)
        assert out.tolist() == [7.0]

    def test_zero_sum_elects_zero(self):
        # a zero sum means equal positive and negative mass, so the fallback ties too
        assert elect_sign(np.array([[2.0], [-1.0], [-1.0]])).tolist() == [0.0]
        assert elect_sign(np.array([[2.0, 1.0], [-2.0, 0.5]])).tolist() == [0.0, 1.0]

    def test_hand_example(self):
        deltas = [np.array([3.0, -1.0]), np.array([1.0, 1.0])]
        assert trim(deltas[0], 0.5).tolist() == [3.0, 0.0]
        assert trim(deltas[1], 0.5).tolist() == [0.0, 1.0]
        out = ties_merge(np.zeros(2), deltas, 0.5, 1.0)
        assert out.tolist() == [3.0, 1.0]
        assert out.tolist() == py_ties([0.0, 0.0], [d.tolist() for d in deltas], 0.5)

    def test_trim_tie_breaks_high_index(self):
        assert trim(np.array([1.0, -1.0, 1.0, 0.5]), 0.5).tolist() == [0.0, -1.0, 1.0, 0.0]

    @settings(max_examples=300, deadline=None)
    @given(st.integers(1, 7).flatmap(lambda n: st.tuples(
        st.lists(SMALL, min_size=n, max_size=n), st.integers(1, 3).flatmap(lambda k: _deltas(n, k)),
        st.sampled_from([0.2, 0.5, 0.75, 1.0]), st.sampled_from([0.0, 0.5, 1.0]))))
    def test_matches_oracle(self, case):
        base, deltas, density, lam = case
        got = ties_merge(np.array(base), [np.array(d) for d in deltas], density, lam)
        assert got.tolist() == py_ties(base, deltas, density, lam)
        for d in deltas:
            assert trim(np.array(d), density).tolist() == py_trim(d, density)


class TestDareTies:
    def test_zero_drop_is_ties(self):
        base = normal(5, 8)
        deltas = [normal(6, 8), normal(7, 8)]
        np.testing.assert_array_equal(dare_ties(base, deltas, 0.0, 0.5, 1.0, 3),
                                      ties_merge(base, deltas, 0.5, 1.0))

    def test_single_dense(self):
        base, delta = np.array([1.0, 2.0, 3.0]), np.array([0.5, 0.25, -1.0])
        np.testing.assert_array_equal(dare_ties(base, [delta], 0.0, 1.0, 1.0, 0), base + delta)

    def test_composition_oracle(self):
        base = normal(8, 8).tolist()
        deltas = [normal(9, 8).tolist(), normal(10, 8).tolist()]
        pruned = [py_dare(d, 0.5, uniform(4, 8, "dare", f"w#{k}")) for k, d in enumerate(deltas)]
        got = dare_ties(np.array(base), [np.array(d) for d in deltas], 0.5, 0.5, 1.0, 4, "w")
        assert got.tolist() == py_ties(base, pruned, 0.5)
        lin = dare_linear(np.array(base), [np.array(d) for d in deltas], 0.5, 1.0, 4, "w")
        np.testing.assert_array_equal(lin, np.array(base) + (np.array(pruned[0]) + pruned[1]))


class TestSce:
    def test_identical_deltas(self):
        delta = np.array([1.0, -2.0, 0.5, 3.0])
        out = sce_merge(np.zeros(4), [delta, delta], density=1.0)
        np.testing.assert_array_equal(out, delta)

    def test_opposite_deltas_erase(self):
        out = sce_merge(np.array([5.0, 6.0]), [np.array([1.0, 0.0]), np.array([-1.0, 0.0])], 1.0)
        assert out.tolist() == [5.0, 6.0]

    def test_single_delta_fallback(self):
        delta = np.array([0.1, -3.0, 2.0, 0.5])
        np.testing.assert_array_equal(sce_merge(np.zeros(4), [delta], 0.5), trim(delta, 0.5))

    @settings(max_examples=300, deadline=None)
    @given(st.integers(1, 7).flatmap(lambda n: st.tuples(
        st.lists(SMALL, min_size=n, max_size=n), st.integers(1, 3).flatmap(lambda k: _deltas(n, k)),
        st.sampled_from([0.3, 0.5, 1.0]), st.sampled_from([0.0, 0.5, 1.0]))))
    def test_matches_oracle(self, case):
        base, deltas, density, lam = case
        got = sce_merge(np.array(base), [np.array(d) for d in deltas], density, lam)
        assert got.tolist() == py_sce(base, deltas, density, lam)


@pytest.mark.parametrize("method", ["task-arithmetic", "dare-linear", "ties", "dare-ties", "sce"])
def test_lambda_zero_is_base(method):
    e = TensorEntry.from_array
    base = TensorMap({"w": e(normal(1, 12).reshape(3, 4)), "z": e([-0.0, 0.0, 1.0])})
    sec = TensorMap({"w": e(normal(2, 12).reshape(3, 4)), "z": e([1.0, -2.0, 3.0])})
    out = merge_checkpoint(base, [sec], BaselineConfig(method=method, lam=0.0)).fused
    assert all(out[n].raw == base[n].raw for n in base)
    same = merge_checkpoint(base, [base], BaselineConfig(method=method)).fused
    assert all(same[n].raw == base[n].raw for n in base)


def test_merge_checkpoint_threads_and_stats():
    e = TensorEntry.from_array
    base = TensorMap({f"t{i}": e(normal(i, 64).reshape(8, 8)) for i in range(4)})
    secs = [TensorMap({n: e(base[n].values + 0.1 * normal(10 + k, 64, n).reshape(8, 8))
                       for n in base}) for k in range(2)]
    cfg = BaselineConfig(method="dare-ties", seed=3)
    one = merge_checkpoint(base, secs, cfg, threads=1)
    many = merge_checkpoint(base, secs, cfg, threads=4)
    assert all(one.fused[n].raw == many.fused[n].raw for n in base)
    assert [s.name for s in one.stats] == sorted(base)
    assert all(0 < s.changed <= s.total for s in one.stats)


def test_config_validation():
    with pytest.raises(ValueError):
        BaselineConfig(method="average")
    with pytest.raises(ValueError):
        BaselineConfig(density=0.0)
    with pytest.raises(ValueError):
        BaselineConfig(drop_rate=1.0)
