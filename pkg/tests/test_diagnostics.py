import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scf_rkl.checkpoint_io import TensorEntry, TensorMap
from scf_rkl.diagnostics import (
    ProvenanceHistogram,
    entropy_probe,
    layer_order,
    layer_sweep,
    nss,
    provenance,
    slice_entropy,
    slice_rkl,
    stability_probe,
    svd_spectrum,
    wedin_check,
)
from scf_rkl.fixtures import FixtureSpec, make_fixture
from scf_rkl.fusion import ShapeMismatchError, fuse_checkpoint
from scf_rkl.baselines import BaselineConfig, merge_checkpoint
from scf_rkl.rng import normal

from oracles import mp_rkl, mp_softmax


def _matrix(seed, n=8, m=6):
    return normal(seed, n * m).reshape(n, m)


class TestNss:
    def test_identity_cases(self):
        w = _matrix(1)
        assert nss(w, w) == 0.0
        assert nss(w, 1.1 * w) == pytest.approx(0.1, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.01, 10), st.integers(0, 1000))
    def test_homogeneity(self, c, seed):
        w = _matrix(seed, 5, 4)
        assert nss(w, c * w) == pytest.approx(abs(1 - c), abs=1e-12)

    def test_direct_formula(self):
        wb, wf = _matrix(2), _matrix(2) + 0.1 * _matrix(3)
        sb = np.linalg.svd(wb, compute_uv=False)
        sf = np.linalg.svd(wf, compute_uv=False)
        assert nss(wb, wf) == pytest.approx(np.linalg.norm(sf - sb) / np.linalg.norm(sb), abs=1e-12)

    def test_zero_base(self):
        with pytest.raises(ValueError):
            nss(np.zeros((2, 2)), np.eye(2))

    def test_rank3_reshaped(self):
        w = normal(4, 24).reshape(2, 3, 4)
        s, u = svd_spectrum(w)
        assert s.shape == (2,) and u.shape == (2, 2)


class TestWedin:
    def test_identical(self):
        w = _matrix(5)
        res = wedin_check(w, w, 2)
        assert res.applicable and res.holds and res.rhs == 0.0 and res.lhs < 1e-12

    def test_two_by_two(self):
        base = np.diag([10.0, 1.0])
        e = np.array([[0.0, 0.1], [0.1, 0.0]])
        res = wedin_check(base, base + e, 1)
        assert res.gap == 9.0
        assert res.rhs == pytest.approx(0.1 / 9, rel=1e-14)
        # closed form: the top left singular vector of [[10, .1], [.1, 1]] tilts by
        # atan(2 * 0.1 * 10 ... ) / 2; compare against the symmetric eigenproblem
        a = base + e
        tilt = 0.5 * math.atan2(2 * 0.1 * 10 + 2 * 0.1 * 1, 10 ** 2 - 1 ** 2)
        assert res.lhs == pytest.approx(math.sin(tilt), rel=1e-9)
        assert res.holds

    def test_not_applicable_without_gap(self):
        res = wedin_check(np.eye(3), np.eye(3) + 0.01 * _matrix(6, 3, 3), 1)
        assert not res.applicable and not res.holds

    def test_k_range(self):
        with pytest.raises(ValueError):
            wedin_check(np.eye(3), np.eye(3), 4)


class TestProvenance:
    def test_partition(self):
        e = TensorEntry.from_array
        base = e([1.0, 2.0, 3.0, 4.0])
        sec = e([1.0, 5.0, 3.0, 6.0])
        fused = e([1.0, 5.0, 7.0, 4.0])
        h = provenance(base, sec, fused)
        assert (h.from_both, h.from_secondary, h.from_neither, h.from_base) == (1, 1, 1, 1)
        assert h.total == 4 and h.neither_fraction == 0.25
        assert (h + h).total == 8

    def test_mixed_dtypes_compare_as_f64(self):
        base = TensorEntry.from_array([0.5, 0.1], "BF16")
        sec = TensorEntry.from_array([0.5, 0.1], "F64")
        h = provenance(base, sec, base)
        assert h.from_both == 1 and h.from_base == 1

    def test_shape_mismatch(self):
        e = TensorEntry.from_array
        with pytest.raises(ShapeMismatchError):
            provenance(e([1.0]), e([1.0, 2.0]), e([1.0]))

    def test_methods_on_gaussian_fixture(self):
        base, sec = make_fixture(FixtureSpec(layers=2, width=32, seed=3))
        scf = fuse_checkpoint(base, sec).fused
        ta = merge_checkpoint(base, [sec], BaselineConfig(lam=0.5)).fused
        for n in base:
            assert provenance(base[n], sec[n], scf[n]).from_neither == 0
            if n.endswith("weight"):
                assert provenance(base[n], sec[n], ta[n]).neither_fraction > 0.99


class TestEntropy:
    @pytest.mark.parametrize("n", [1, 2, 7, 64, 1000])
    def test_uniform(self, n):
        assert abs(slice_entropy(np.zeros(n))[0] - math.log(n)) <= 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=40))
    def test_bounds(self, x):
        h = slice_entropy(np.array(x))[0]
        assert -1e-12 <= h <= math.log(len(x)) + 1e-12

    def test_matches_high_precision(self):
        x = [0.3, -1.2, 2.5, 0.0]
        r = mp_softmax(x)
        want = -sum(v * math.log(v) for v in (float(t) for t in r))
        assert slice_entropy(np.array(x))[0] == pytest.approx(want, abs=1e-14)

    def test_probe(self):
        w = _matrix(7)
        probe = entropy_probe(w, w)
        assert probe.entropy_drop == 0.0 and math.isnan(probe.implied_lipschitz)
        probe = entropy_probe(w, w * 3)
        assert probe.entropy_drop > 0 and probe.slices == 8


class TestStability:
    def test_trivial_cases(self):
        b, s = _matrix(8), _matrix(9)
        same = stability_probe(b, s, b)
        assert same.rkl_base_to_fused == 0.0 and same.violations == 0
        full = stability_probe(b, s, s)
        assert full.rkl_base_to_fused == full.rkl_base_to_secondary

    def test_slice_rkl_oracle(self):
        x, y = [0.2, -0.5, 1.0], [1.5, 0.0, -2.0]
        want = float(mp_rkl(mp_softmax(x), mp_softmax(y)))
        assert slice_rkl(np.array(x), np.array(y))[0] == pytest.approx(want, abs=1e-14)


class TestLayerSweep:
    def test_identity_sweep(self):
        base, sec = make_fixture(FixtureSpec(layers=2, width=16))
        reports = layer_sweep(base, sec, base)
        assert all(r.nss_vs_base == 0.0 for r in reports)
        assert all(r.max_angle_vs_base_deg < 1e-9 for r in reports)

    def test_selector_and_order(self):
        base, sec = make_fixture(FixtureSpec(layers=4, width=16))
        names = [r.tensor_name for r in layer_sweep(base, sec, sec, "layers.*.weight")]
        assert names == [f"layers.{i}.weight" for i in range(4)]
        names = [r.tensor_name for r in layer_sweep(base, sec, sec, "*.weight")]
        assert names[-1] == "head.weight" and len(names) == 5
        with pytest.raises(ValueError):
            layer_sweep(base, sec, sec, "nothing*")

    def test_layer_order_numeric(self):
        assert layer_order(["l.10.w", "l.2.w", "emb", "l.1.w"]) == ["l.1.w", "l.2.w", "l.10.w", "emb"]

    def test_cache_and_threads_do_not_change_results(self):
        base, sec = make_fixture(FixtureSpec(layers=2, width=16, seed=5))
        fused = fuse_checkpoint(base, sec).fused
        plain = [r.to_dict() for r in layer_sweep(base, sec, fused)]
        cache = {}
        cached = [r.to_dict() for r in layer_sweep(base, sec, fused, cache=cache, threads=3)]
        assert plain == cached and len(cache) == 3
        again = [r.to_dict() for r in layer_sweep(base, sec, fused, cache=cache)]
        assert plain == again

    def test_report_fields(self):
        base, sec = make_fixture(FixtureSpec(layers=1, width=20, seed=2))
        fused = fuse_checkpoint(base, sec).fused
        r = layer_sweep(base, sec, fused, "layers.0.weight", k=4)[0]
        assert r.rank_k == 4 and r.layer == 0
        assert r.sigma_base == sorted(r.sigma_base, reverse=True)
        assert 0 <= r.max_angle_vs_base_deg <= 90 and r.wedin_lhs <= 1
        assert r.wedin_applicable and r.wedin_holds


def test_histogram_sum_default():
    assert sum([ProvenanceHistogram(1, 2, 3, 4, 10)] * 2, ProvenanceHistogram()).total == 20
