import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import cramervonmises_2samp

from tlupdate.data import DriftInjection, generate_synthetic
from tlupdate.drift import (
    correlation_shift,
    cvm_statistic,
    cvm_two_sample,
    drift_report,
    psi,
    psi_from_proportions,
)


def ecdf_cvm(a, b):
    # direct definition: nm/(n+m)^2 * sum over pooled points of (F_a - F_b)^2
    a, b = np.sort(a), np.sort(b)
    pooled = np.concatenate([a, b])
    fa = np.searchsorted(a, pooled, side="right") / len(a)
    fb = np.searchsorted(b, pooled, side="right") / len(b)
    n, m = len(a), len(b)
    return n * m / (n + m) ** 2 * np.sum((fa - fb) ** 2)


class TestPsi:
    def test_identical_is_zero(self):
        x = np.random.default_rng(0).normal(size=500)
        assert psi(x, x).psi == pytest.approx(0.0, abs=1e-12)

    def test_two_bin_hand_value(self):
        # (0.25-0.5)ln(0.5) + (0.75-0.5)ln(1.5)
        assert psi_from_proportions([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.2746530721670274, rel=1e-12)

    def test_two_bin_from_data(self):
        ref = np.arange(1.0, 9.0)  # median 4.5
        cur = np.array([1, 2, 5, 6, 7, 8, 9, 10], float)
        r = psi(ref, cur, bins=2)
        np.testing.assert_allclose(r.cur_proportions, [0.25, 0.75])
        assert r.psi == pytest.approx(0.2746530721670274, rel=1e-12)

    def test_empty_bin_is_floored(self):
        ref = np.arange(100.0)
        cur = np.full(50, 1000.0)
        r = psi(ref, cur)
        assert np.isfinite(r.psi) and r.psi > 5
        assert r.cur_proportions.sum() == pytest.approx(1.0)

    def test_too_few_values(self):
        with pytest.raises(ValueError):
            psi(np.arange(5.0), np.arange(50.0))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 1000), st.floats(-3, 3))
    def test_nonnegative_and_shift_invariant(self, seed, offset):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=200), rng.normal(0.3, 1.2, size=150)
        v = psi(a, b).psi
        assert v >= 0
        assert psi(a + offset, b + offset).psi == pytest.approx(v, rel=1e-9, abs=1e-12)


class TestCvm:
    def test_hand_value(self):
        assert cvm_statistic([1.0, 2.0], [3.0, 4.0]) == pytest.approx(0.375, rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 30), st.integers(2, 30), st.integers(0, 10_000))
    def test_matches_ecdf_definition(self, n, m, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=n), rng.normal(0.5, size=m)
        assert cvm_statistic(a, b) == pytest.approx(ecdf_cvm(a, b), rel=1e-9, abs=1e-12)

    def test_matches_scipy_with_ties(self):
        rng = np.random.default_rng(1)
        a = rng.integers(0, 6, 40).astype(float)
        b = rng.integers(1, 7, 35).astype(float)
        assert cvm_statistic(a, b) == pytest.approx(cramervonmises_2samp(a, b).statistic, rel=1e-10)

    def test_identical_samples_not_significant(self):
        x = np.random.default_rng(2).normal(size=60)
        assert cvm_two_sample(x, x.copy(), permutations=199).p_value >= 0.5

    def test_separated_samples_significant(self):
        rng = np.random.default_rng(3)
        r = cvm_two_sample(rng.normal(size=80), rng.normal(2, size=80), permutations=199)
        assert r.p_value == pytest.approx(1 / 200)

    def test_p_value_bounds_and_determinism(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=30), rng.normal(size=25)
        r1 = cvm_two_sample(a, b, permutations=199, seed=7)
        r2 = cvm_two_sample(a, b, permutations=199, seed=7)
        assert r1 == r2
        assert 1 / 200 <= r1.p_value <= 1

    def test_super_uniform_under_null(self):
        rejections = 0
        reps = 200
        for rep in range(reps):
            rng = np.random.default_rng(1000 + rep)
            p = cvm_two_sample(rng.normal(size=20), rng.normal(size=20), permutations=99, seed=rep).p_value
            rejections += p <= 0.05
        assert rejections / reps <= 0.07

    def test_validation(self):
        with pytest.raises(ValueError):
            cvm_two_sample([], [1.0])
        with pytest.raises(ValueError):
            cvm_two_sample([1.0], [2.0], permutations=10)


class TestCorrelation:
    def test_sign_flip_gives_change_two(self):
        t = np.linspace(0, 1, 50)
        ref = np.column_stack([t, t])
        cur = np.column_stack([t, -t])
        assert correlation_shift(ref, cur).max_abs_change == pytest.approx(2.0)

    def test_constant_column_flagged(self):
        rng = np.random.default_rng(0)
        ref = rng.normal(size=(30, 3))
        cur = rng.normal(size=(30, 3))
        cur[:, 1] = 4.0
        r = correlation_shift(ref, cur, ("a", "b", "c"))
        assert r.degenerate == ("b",)
        assert np.isnan(r.current[0, 1]) and np.isfinite(r.max_abs_change)

    def test_symmetric_with_unit_diagonal(self):
        rng = np.random.default_rng(1)
        r = correlation_shift(rng.normal(size=(40, 4)), rng.normal(size=(40, 4)))
        np.testing.assert_array_equal(r.reference, r.reference.T)
        np.testing.assert_array_equal(np.diag(r.current), 1.0)


def test_report_flags_shifted_inputs_only():
    name = "Secondary Air Outlet Temperature"
    d = generate_synthetic(10, 600, DriftInjection(5, {name: 2.0}), seed=0)
    rep = drift_report(d.slice(0, 720), d.slice(720, 1440), permutations=99)
    by = {f.name: f for f in rep.features}
    assert len(by) == 9
    assert by[name].psi.psi > 1.0 and by[name].cvm.p_value == pytest.approx(0.01)
    assert by["Oxygen Inlet"].psi.psi < by[name].psi.psi
    assert rep.table_csv().startswith("feature,psi,cvm,p")
