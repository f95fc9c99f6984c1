import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from uvcorrect.evaluation import clustering_distance
from uvcorrect.linalg import QuadraticNormSpec
from oracles import brute_kmeans, brute_sigma, map_oracle, random_spec
from uvcorrect.unsupervised import (
    FactorEstimate,
    Partition,
    dictionary_objective,
    kmeans,
    kmeans_sigma_relaxed,
    kmeans_sigma_rowwise,
    lasso_columns,
    map_objective,
    map_shrunk_regression,
    project_simplex_rows,
    sparse_dictionary,
)


def clouds(seed, m_per=5, sep=20.0, dim=3):
    rng = np.random.default_rng(seed)
    centers = np.vstack([np.zeros(dim), sep * np.ones(dim)])
    labels = np.repeat([0, 1], m_per)
    return centers[labels] + rng.standard_normal((2 * m_per, dim)), labels


class TestPartition:
    def test_membership_one_hot(self):
        x = Partition([0, 2, 1, 2], 3).membership()
        np.testing.assert_array_equal(x.sum(axis=1), 1.0)
        np.testing.assert_array_equal(np.argmax(x, axis=1), [0, 2, 1, 2])

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            Partition([0, 3], 3)

    def test_from_labels(self):
        p = Partition.from_labels(["b", "a", "b"])
        np.testing.assert_array_equal(p.assignments, [1, 0, 1])
        assert p.k == 2


class TestKMeans:
    def test_separable_recovery(self):
        y, labels = clouds(0)
        res = kmeans(y, 2, seed=0)
        assert clustering_distance(res.partition, Partition(labels, 2)).value == 0.0

    def test_k_equals_m(self):
        y = np.random.default_rng(1).standard_normal((6, 3))
        assert kmeans(y, 6).objective == pytest.approx(0.0, abs=1e-20)

    def test_matches_exhaustive_search(self):
        hits = 0
        for seed in range(20):
            y = np.random.default_rng(seed).standard_normal((8, 2))
            res = kmeans(y, 2, n_restarts=50, seed=seed)
            opt = brute_kmeans(y, 8)
            assert res.objective >= opt - 1e-9
            hits += res.objective <= opt * (1 + 1e-9)
        assert hits == 20

    def test_best_of_restarts(self):
        y = np.random.default_rng(2).standard_normal((30, 4))
        res = kmeans(y, 4, n_restarts=8, seed=3)
        assert res.objective == min(res.restart_objectives)

    def test_objective_non_increasing(self):
        y = np.random.default_rng(4).standard_normal((40, 5))
        trace = np.array(kmeans(y, 5, n_restarts=1, seed=0).trace)
        assert np.all(np.diff(trace) <= 1e-9)

    def test_deterministic(self):
        y = np.random.default_rng(5).standard_normal((25, 3))
        a, b = kmeans(y, 3, seed=7), kmeans(y, 3, seed=7)
        np.testing.assert_array_equal(a.partition.assignments, b.partition.assignments)

    def test_empty_cluster_reseeded(self):
        y = np.vstack([np.zeros((5, 2)), np.ones((1, 2))])
        res = kmeans(y, 2, init_centers=[[0.0, 0.0], [50.0, 50.0]], n_restarts=1)
        assert np.bincount(res.partition.assignments, minlength=2).min() >= 1

    @pytest.mark.parametrize("k", [0, 5])
    def test_k_out_of_range(self, k):
        with pytest.raises(ValueError):
            kmeans(np.ones((4, 2)), k)

    def test_constraint_kind(self):
        est = kmeans(np.random.default_rng(6).standard_normal((9, 2)), 3).estimate
        assert est.constraint_kind == "membership"
        np.testing.assert_array_equal(est.x_hat.sum(axis=1), 1.0)


class TestSigmaRowwise:
    def test_identity_reduces_to_kmeans(self):
        for seed in range(10):
            y = np.random.default_rng(seed).standard_normal((12, 3))
            spec = QuadraticNormSpec.identity(12)
            a = kmeans(y, 3, n_restarts=1, seed=seed)
            b = kmeans_sigma_rowwise(y, 3, spec, seed=seed)
            assert b.objective == pytest.approx(a.objective, rel=1e-10)

    def test_brute_force_m4(self):
        hits = 0
        for seed in range(50):
            rng = np.random.default_rng(seed)
            y = rng.standard_normal((4, 3))
            spec = random_spec(rng, 4)
            opt = brute_sigma(y, spec.inverse_matrix())
            res = kmeans_sigma_rowwise(y, 2, spec, seed=seed, n_restarts=10)
            assert res.objective >= opt - 1e-9 * max(1.0, opt)
            hits += res.objective <= opt + 1e-9 * max(1.0, opt)
        assert hits >= 45

    def test_objective_non_increasing(self):
        rng = np.random.default_rng(11)
        y = rng.standard_normal((15, 4))
        res = kmeans_sigma_rowwise(y, 3, random_spec(rng, 15, 3), seed=0)
        assert np.all(np.diff(res.trace) <= 1e-9 * abs(res.trace[0]))

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(12)
        y, _ = clouds(12, m_per=4)
        w = rng.standard_normal((8, 2))
        perm = rng.permutation(8)
        a = kmeans_sigma_rowwise(y, 2, QuadraticNormSpec(w, 1.0), seed=0, n_restarts=5)
        b = kmeans_sigma_rowwise(y[perm], 2, QuadraticNormSpec(w[perm], 1.0), seed=0, n_restarts=5)
        assert a.objective == pytest.approx(b.objective, rel=1e-10)

    def test_spec_size_mismatch(self):
        with pytest.raises(ValueError):
            kmeans_sigma_rowwise(np.ones((4, 2)), 2, QuadraticNormSpec.identity(5))


class TestSigmaRelaxed:
    def test_separable_matches_kmeans(self):
        y, labels = clouds(13)
        res = kmeans_sigma_relaxed(y, 2, QuadraticNormSpec.identity(10), seed=0)
        ref = kmeans(y, 2, seed=0).partition
        assert clustering_distance(res.partition, ref).value == 0.0

    def test_projection_keeps_memberships_feasible(self):
        rng = np.random.default_rng(14)
        x = Partition(rng.integers(0, 3, 10), 3).membership()
        out = project_simplex_rows(x - 0.3 * rng.standard_normal(x.shape))
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(project_simplex_rows(x), x)

    def test_brute_force_m4(self):
        within = 0
        for seed in range(50):
            rng = np.random.default_rng(seed)
            y = rng.standard_normal((4, 3))
            spec = random_spec(rng, 4)
            opt = brute_sigma(y, spec.inverse_matrix())
            res = kmeans_sigma_relaxed(y, 2, spec, seed=seed, n_restarts=5)
            within += res.objective <= 1.05 * opt
        assert within >= 40

    def test_relaxed_trace_non_increasing(self):
        rng = np.random.default_rng(15)
        y = rng.standard_normal((12, 3))
        res = kmeans_sigma_relaxed(y, 3, random_spec(rng, 12), seed=1)
        assert np.all(np.diff(res.trace) <= 1e-9 * abs(res.trace[0]))

    def test_identity_relaxed_is_valid_partition(self):
        y = np.random.default_rng(16).standard_normal((9, 2))
        res = kmeans_sigma_relaxed(y, 3, QuadraticNormSpec.identity(9), seed=0)
        assert res.partition.m == 9


def lasso_oracle(x, y, lam):
    # split b = u - v with u, v >= 0 and solve the smooth bound-constrained problem
    p, n = x.shape[1], y.shape[1]

    def f(z):
        u, v = z[: p * n].reshape(p, n), z[p * n :].reshape(p, n)
        r = y - x @ (u - v)
        g = -x.T @ r
        val = 0.5 * np.sum(r**2) + lam * np.sum(u + v)
        return val, np.concatenate([(g + lam).ravel(), (-g + lam).ravel()])

    res = minimize(
        f, np.zeros(2 * p * n), jac=True, method="L-BFGS-B",
        bounds=[(0, None)] * (2 * p * n), options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 10000},
    )
    z = res.x
    return z[: p * n].reshape(p, n) - z[p * n :].reshape(p, n)


class TestSparseDictionary:
    def test_lambda_zero_full_rank(self):
        y = np.random.default_rng(17).standard_normal((5, 7))
        res = sparse_dictionary(y, 5, 0.0)
        assert res.objective == pytest.approx(0.0, abs=1e-6)

    def test_lambda_zero_matches_truncated_svd(self):
        y = np.random.default_rng(18).standard_normal((6, 8))
        s = np.linalg.svd(y, compute_uv=False)
        res = sparse_dictionary(y, 3, 0.0)
        assert res.objective == pytest.approx(0.5 * np.sum(s[3:] ** 2), abs=1e-6)

    def test_full_shrinkage(self):
        rng = np.random.default_rng(19)
        y = rng.standard_normal((5, 6))
        x = np.linalg.qr(rng.standard_normal((5, 2)))[0]
        lam = np.max(np.abs(x.T @ y))
        np.testing.assert_array_equal(lasso_columns(x, y, lam), 0.0)
        res = sparse_dictionary(y, 2, 10 * np.max(np.abs(y)) * 5)
        np.testing.assert_array_equal(res.estimate.beta_hat, 0.0)

    def test_small_instance_against_convex_solver(self):
        rng = np.random.default_rng(20)
        y = rng.standard_normal((5, 4))
        lam = 0.1
        u = np.linalg.svd(y, full_matrices=False)[0][:, :2]
        start = dictionary_objective(y, u, u.T @ y, lam)
        res = sparse_dictionary(y, 2, lam)
        assert res.objective <= start
        x = res.estimate.x_hat
        np.testing.assert_allclose(lasso_columns(x, y, lam), lasso_oracle(x, y, lam), atol=1e-5)
        np.testing.assert_allclose(res.estimate.beta_hat, lasso_oracle(x, y, lam), atol=1e-5)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31), lam=st.floats(0.0, 2.0), p=st.integers(1, 4))
    def test_monotone_and_unit_norm(self, seed, lam, p):
        y = np.random.default_rng(seed).standard_normal((6, 9))
        res = sparse_dictionary(y, p, lam, seed=seed, max_iter=30)
        trace = np.array(res.trace)
        assert np.all(np.diff(trace) <= 1e-9 * max(1.0, trace[0]))
        np.testing.assert_allclose(np.linalg.norm(res.estimate.x_hat, axis=0), 1.0, atol=1e-10)

    def test_p_out_of_range(self):
        with pytest.raises(ValueError):
            sparse_dictionary(np.ones((3, 4)), 4, 0.1)

    def test_warm_start(self):
        y = np.random.default_rng(21).standard_normal((6, 9))
        first = sparse_dictionary(y, 2, 0.3, max_iter=5)
        again = sparse_dictionary(y, 2, 0.3, max_iter=5, init=first.estimate)
        assert again.objective <= first.objective + 1e-12


class TestMapRegression:
    def test_matches_numerical_minimizer(self):
        rng = np.random.default_rng(22)
        x, y = rng.standard_normal((4, 2)), rng.standard_normal((4, 3))
        b = map_shrunk_regression(y, x, 0.5, 2.0)
        np.testing.assert_allclose(b, map_oracle(y, x, 0.5, 2.0), atol=1e-6)

    def test_single_column_equal_penalties(self):
        rng = np.random.default_rng(23)
        x, y = rng.standard_normal((5, 2)), rng.standard_normal((5, 1))
        lam = 0.8
        expected = np.linalg.solve(x.T @ x + 0.5 * lam * np.eye(2), x.T @ y)
        np.testing.assert_allclose(map_shrunk_regression(y, x, lam, lam), expected, atol=1e-12)

    def test_large_nu_is_independent_ridge(self):
        rng = np.random.default_rng(24)
        x, y = rng.standard_normal((5, 2)), rng.standard_normal((5, 4))
        expected = np.linalg.solve(x.T @ x + 0.7 * np.eye(2), x.T @ y)
        np.testing.assert_allclose(map_shrunk_regression(y, x, 0.7, 1e12), expected, atol=1e-9)

    def test_zero_penalties_is_ols(self):
        rng = np.random.default_rng(25)
        x, y = rng.standard_normal((6, 3)), rng.standard_normal((6, 4))
        np.testing.assert_allclose(
            map_shrunk_regression(y, x, 0.0, 0.0), np.linalg.lstsq(x, y, rcond=None)[0], atol=1e-12
        )

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31), lam=st.floats(0.01, 10), nu=st.floats(0.0, 10))
    def test_stationary(self, seed, lam, nu):
        rng = np.random.default_rng(seed)
        x, y = rng.standard_normal((6, 2)), rng.standard_normal((6, 3))
        b = map_shrunk_regression(y, x, lam, nu)
        base = map_objective(y, x, b, lam, nu)
        for _ in range(5):
            assert map_objective(y, x, b + 1e-4 * rng.standard_normal(b.shape), lam, nu) >= base - 1e-12

    def test_rank_deficient(self):
        x = np.ones((4, 2))
        with pytest.raises(ValueError):
            map_shrunk_regression(np.ones((4, 1)), x, 1.0, 1.0)


def test_factor_estimate_kind_validated():
    with pytest.raises(ValueError):
        FactorEstimate(np.eye(2), np.eye(2), "other")
