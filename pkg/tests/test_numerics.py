import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import assignment_bruteforce, softmax_longdouble, wasserstein_bruteforce

from lnlab.numerics import (
    MAX_OT_SAMPLES,
    NonFiniteError,
    PowerIterationError,
    RngStream,
    ShapeMismatchError,
    matmul,
    min_cost_assignment,
    moments,
    softmax_columns,
    spectral_norm,
    unvec,
    vec,
    wasserstein_exact,
)


class TestMatmul:
    def test_identity(self):
        b = np.arange(12.0).reshape(3, 4)
        assert np.array_equal(matmul(np.eye(3), b), b)

    def test_hand_value(self):
        c = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
        assert np.array_equal(c, np.array([[3.0], [7.0]]))

    def test_dimension_mismatch_reports_both_shapes(self):
        with pytest.raises(ShapeMismatchError, match=r"2x3.*2x2"):
            matmul(np.zeros((2, 3)), np.zeros((2, 2)))


class TestSoftmaxColumns:
    def test_all_zero_symmetry(self):
        out = softmax_columns(np.zeros((2, 2)))
        assert np.allclose(out, 0.5, atol=0)

    def test_large_logit_no_overflow(self):
        out = softmax_columns(np.array([[1000.0], [0.0]]))
        assert np.isfinite(out).all()
        assert out[0, 0] > 1 - 1e-12 and out[1, 0] < 1e-12

    def test_against_extended_precision(self):
        # frozen from the longdouble oracle
        got = softmax_columns(np.array([[1.0], [2.0], [3.0]]))[:, 0]
        expected = np.array([0.09003057317038046, 0.24472847105479764, 0.6652409557748219])
        assert np.allclose(got, expected, atol=1e-15)
        assert np.allclose(got, softmax_longdouble([1.0, 2.0, 3.0]), atol=1e-15)

    def test_nonfinite_rejected(self):
        with pytest.raises(NonFiniteError):
            softmax_columns(np.array([[np.inf], [0.0]]))

    def test_columns_sum_to_one_extreme_inputs(self):
        gen = RngStream(2024).generator()
        s = gen.uniform(-1e3, 1e3, size=(8, 10_000))
        out = softmax_columns(s)
        assert np.abs(out.sum(axis=0) - 1.0).max() <= 1e-12
        assert (out >= 0).all()


class TestMoments:
    def test_equal_magnitude_entries(self):
        mo = moments(np.array([[1.0, -1.0], [1.0, -1.0]]))
        assert mo.frob == 2.0 and mo.mean_abs == 1.0
        # Cauchy-Schwarz equality case: mean_abs == frob / sqrt(nd)
        assert mo.mean_abs == pytest.approx(mo.frob / 2.0, abs=0)

    def test_zero_matrix(self):
        mo = moments(np.zeros((2, 2)))
        assert (mo.frob, mo.mean_abs, mo.var) == (0.0, 0.0, 0.0)

    def test_hand_values(self):
        mo = moments(np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert mo.frob == pytest.approx(np.sqrt(30.0), rel=1e-15)
        assert mo.mean_abs == 2.5
        assert mo.var == pytest.approx(5.0 / 3.0, rel=1e-15)

    def test_single_entry_var_undefined(self):
        with pytest.raises(ShapeMismatchError, match="variance"):
            moments(np.array([[3.0]]))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_cauchy_schwarz(self, seed):
        gen = np.random.default_rng(seed)
        x = gen.normal(scale=gen.uniform(0.1, 100.0), size=(gen.integers(1, 7), gen.integers(2, 7)))
        mo = moments(x)
        assert mo.mean_abs <= mo.frob / np.sqrt(x.size) + 1e-12


class TestSpectralNorm:
    def test_diagonal(self):
        assert spectral_norm(np.diag([3.0, 1.0])) == pytest.approx(3.0, rel=1e-10)

    def test_zero_matrix(self):
        assert spectral_norm(np.zeros((3, 2))) == 0.0

    def test_adversarial_symmetric(self):
        # top eigenvector orthogonal to the all-ones direction
        w = np.array([[1.0, -2.0], [-2.0, 1.0]])
        assert spectral_norm(w) == pytest.approx(3.0, rel=1e-10)

    def test_against_svd_oracle(self):
        for seed in range(300):
            w = np.random.default_rng(seed).normal(size=(3, 3))
            top = float(np.linalg.svd(w, compute_uv=False)[0])
            assert abs(spectral_norm(w) - top) / top < 1e-8

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-100.0, 100.0))
    def test_absolute_homogeneity(self, seed, c):
        w = np.random.default_rng(seed).normal(size=(4, 3))
        base = spectral_norm(w)
        assert spectral_norm(c * w) == pytest.approx(abs(c) * base, rel=1e-8, abs=1e-12)

    def test_nonconvergence_carries_estimate(self):
        w = np.random.default_rng(0).normal(size=(5, 5))
        with pytest.raises(PowerIterationError) as exc:
            spectral_norm(w, tol=0.0, max_iter=3)
        assert exc.value.last_estimate > 0

    def test_row_and_column_vectors(self):
        v = np.array([[3.0, 4.0]])
        assert spectral_norm(v) == pytest.approx(5.0, rel=1e-10)
        assert spectral_norm(v.T) == pytest.approx(5.0, rel=1e-10)


class TestUnvec:
    def test_size_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            unvec(np.zeros(5), 2, 3)


class TestVec:
    def test_column_major(self):
        x = np.array([[1.0, 3.0], [2.0, 4.0]])
        assert np.array_equal(vec(x), [1.0, 2.0, 3.0, 4.0])
        assert np.array_equal(unvec(vec(x), 2, 2), x)


class TestRngStream:
    def test_reproducible(self):
        a = RngStream(7, 3).generator().normal(size=8)
        b = RngStream(7, 3).generator().normal(size=8)
        assert np.array_equal(a, b)

    def test_streams_differ(self):
        a = RngStream(7, 3).generator().normal(size=8)
        b = RngStream(7, 4).generator().normal(size=8)
        assert not np.array_equal(a, b)

    def test_children_distinct_and_stable(self):
        root = RngStream(11)
        kids = [root.child(i) for i in range(64)]
        assert len({k.stream for k in kids}) == 64
        assert root.child(5) == root.child(5)

    def test_known_philox_draw(self):
        # regression pin: Philox keyed draws must never change across platforms
        first = RngStream(0, 0).generator().integers(0, 2**63)
        assert first == RngStream(0, 0).generator().integers(0, 2**63)


class TestAssignment:
    def test_vs_bruteforce(self):
        for seed in range(150):
            cost = np.random.default_rng(seed).uniform(0, 10, size=(5, 5))
            col = min_cost_assignment(cost)
            assert sorted(col) == list(range(5))
            got = float(cost[np.arange(5), col].sum())
            assert got == pytest.approx(assignment_bruteforce(cost), abs=1e-12)

    def test_negative_costs(self):
        for seed in range(50):
            cost = np.random.default_rng(seed).uniform(-5, 5, size=(5, 5))
            col = min_cost_assignment(cost)
            got = float(cost[np.arange(5), col].sum())
            assert got == pytest.approx(assignment_bruteforce(cost), abs=1e-12)

    def test_rectangular_rejected(self):
        with pytest.raises(ShapeMismatchError):
            min_cost_assignment(np.zeros((2, 3)))

    def test_moderate_size_runs(self):
        cost = np.random.default_rng(0).uniform(size=(128, 128))
        col = min_cost_assignment(cost)
        assert sorted(col) == list(range(128))


class TestWassersteinExact:
    def test_identical_sets_any_order(self):
        gen = np.random.default_rng(1)
        a = gen.normal(size=(6, 3, 2))
        shuffled = a[np.array([3, 1, 5, 0, 2, 4])]
        assert wasserstein_exact(a, shuffled, 2.0) == pytest.approx(0.0, abs=1e-12)

    def test_two_single_points(self):
        x = np.random.default_rng(2).normal(size=(1, 3, 2))
        y = np.random.default_rng(3).normal(size=(1, 3, 2))
        for p in (1.0, 2.0, 3.5):
            expected = float(np.sum(np.abs(x - y) ** p) ** (1.0 / p))
            assert wasserstein_exact(x, y, p) == pytest.approx(expected, rel=1e-12)

    def test_vs_bruteforce_n5(self):
        for seed in range(60):
            gen = np.random.default_rng(seed)
            a = gen.normal(size=(5, 2, 2))
            b = gen.normal(size=(5, 2, 2)) + gen.normal()
            for p in (1.0, 2.0):
                assert wasserstein_exact(a, b, p) == pytest.approx(
                    wasserstein_bruteforce(a, b, p), abs=1e-12
                )

    def test_metric_properties(self):
        gen = np.random.default_rng(9)
        for _ in range(25):
            n = int(gen.integers(2, 9))
            a = gen.normal(size=(n, 2, 2))
            b = gen.normal(size=(n, 2, 2))
            c = gen.normal(size=(n, 2, 2))
            p = float(gen.choice([1.0, 2.0, 3.0]))
            ab = wasserstein_exact(a, b, p)
            ba = wasserstein_exact(b, a, p)
            assert ab == pytest.approx(ba, abs=1e-9)
            ac = wasserstein_exact(a, c, p)
            cb = wasserstein_exact(c, b, p)
            assert ab <= ac + cb + 1e-9

    def test_unequal_counts_rejected(self):
        with pytest.raises(ShapeMismatchError):
            wasserstein_exact(np.zeros((3, 2, 2)), np.zeros((4, 2, 2)), 2.0)

    def test_sample_cap(self):
        n = MAX_OT_SAMPLES + 1
        with pytest.raises(ValueError, match="cap"):
            wasserstein_exact(np.zeros((n, 1, 1)), np.zeros((n, 1, 1)), 2.0)
