import numpy as np
import pytest

from blockunfold.blockcore import BlockDictionary, BlockVector, MMVProblem, kron_lift
from blockunfold.solvers import (
    DivergenceError,
    alamp_run,
    bista_run,
    decorrelation_trace,
    default_step_size,
    fast_bista_run,
    lasso_objective,
    spectral_norm,
)
from blockunfold.weights import closed_form_weights

from conftest import random_orthonormal_block_dictionary, unit_column_matrix


def kkt_residuals(D, y, x, alpha):
    """Subgradient optimality residuals of the group LASSO at x.

    Active blocks must satisfy D[i]^T(Dx - y) = -alpha x[i]/||x[i]||;
    inactive blocks need ||D[i]^T(Dx - y)|| <= alpha.
    """
    grad = D.data.T @ (D.data @ x.data - y)
    active_resid, inactive_resid = 0.0, 0.0
    for i in range(D.n):
        g = grad[i * D.d : (i + 1) * D.d]
        xi = x.block(i)
        norm = np.linalg.norm(xi)
        if norm > 1e-10:
            active_resid = max(active_resid, np.linalg.norm(g + alpha * xi / norm))
        else:
            inactive_resid = max(inactive_resid, np.linalg.norm(g) - alpha)
    return active_resid, inactive_resid


class TestSpectralNorm:
    def test_matches_svd(self, rng):
        for _ in range(5):
            A = rng.standard_normal((7, 11))
            assert spectral_norm(A) == pytest.approx(np.linalg.norm(A, 2), abs=1e-8)


class TestLassoObjective:
    def test_zero_point(self, rng):
        D = random_orthonormal_block_dictionary(6, 3, 2, rng)
        y = rng.standard_normal(6)
        val = lasso_objective(D, y, BlockVector.zeros(3, 2), 1.0)
        assert val == pytest.approx(0.5 * y @ y, rel=1e-14)

    def test_exact_fit_no_penalty(self, rng):
        D = random_orthonormal_block_dictionary(6, 3, 2, rng)
        x = BlockVector(rng.standard_normal(6), 3, 2)
        assert lasso_objective(D, D.data @ x.data, x, 0.0) == pytest.approx(0.0, abs=1e-20)

    def test_matches_naive_recomputation(self, rng):
        D = random_orthonormal_block_dictionary(8, 4, 2, rng)
        x = BlockVector(rng.standard_normal(8), 4, 2)
        y = rng.standard_normal(8)
        alpha = 0.37
        naive = 0.5 * np.sum((D.data @ x.data - y) ** 2) + alpha * sum(
            np.linalg.norm(x.block(i)) for i in range(4)
        )
        assert lasso_objective(D, y, x, alpha) == pytest.approx(naive, rel=1e-12)

    def test_shape_mismatch(self, rng):
        D = random_orthonormal_block_dictionary(6, 3, 2, rng)
        with pytest.raises(ValueError):
            lasso_objective(D, np.zeros(5), BlockVector.zeros(3, 2), 1.0)


class TestBista:
    def test_fixed_point_at_origin(self, rng):
        D = random_orthonormal_block_dictionary(6, 3, 2, rng)
        trace = bista_run(D, np.zeros(6), 1.0, default_step_size(D), 10)
        for x in trace.iterates:
            np.testing.assert_array_equal(x, 0.0)
        assert len(trace) == 11

    def test_objective_monotone_100_seeds(self):
        for seed in range(100):
            r = np.random.default_rng(seed)
            D = random_orthonormal_block_dictionary(6, 4, 2, r)
            x_star = np.zeros(8)
            x_star[:2] = r.standard_normal(2)
            y = D.data @ x_star
            trace = bista_run(D, y, 1.0, default_step_size(D), 40)
            obj = np.array(trace.objectives)
            assert np.all(np.diff(obj) <= 1e-12), f"ascent at seed {seed}"

    def test_objective_monotone_long_run(self, rng):
        # noiseless instance, 500 iterations at the default step size
        D = random_orthonormal_block_dictionary(8, 6, 2, rng)
        x_star = np.zeros(12)
        x_star[:4] = rng.standard_normal(4)
        trace = bista_run(D, D.data @ x_star, 1.0, default_step_size(D), 500)
        assert np.all(np.diff(trace.objectives) <= 1e-12)

    def test_converged_kkt_residuals(self, rng):
        D = random_orthonormal_block_dictionary(12, 8, 2, rng)
        x_star = np.zeros(16)
        x_star[:4] = rng.standard_normal(4)
        y = D.data @ x_star
        alpha = 0.1
        gamma = default_step_size(D)
        warm = fast_bista_run(D, y, alpha, gamma, 3000)
        trace = bista_run(D, y, alpha, gamma, 2000, x0=warm.final)
        active, inactive = kkt_residuals(D, y, trace.final, alpha)
        assert active <= 1e-6
        assert inactive <= 1e-6

    def test_gamma_warning(self, rng):
        D = random_orthonormal_block_dictionary(6, 3, 2, rng)
        with pytest.warns(UserWarning, match="gamma"):
            bista_run(D, rng.standard_normal(6), 1.0, 10.0, 1)

    def test_divergence_reports_iteration(self, rng):
        D = BlockDictionary(5.0 * np.eye(4), n=4, d=1)
        with pytest.warns(UserWarning):
            with pytest.raises(DivergenceError):
                bista_run(D, np.ones(4), 0.0, 50.0, 200)

    def test_nmse_tracking(self, rng):
        D = random_orthonormal_block_dictionary(6, 3, 2, rng)
        x_star = rng.standard_normal(6)
        y = D.data @ x_star
        trace = bista_run(D, y, 0.1, default_step_size(D), 5, x_star=x_star)
        assert len(trace.nmse) == 6
        assert trace.nmse[0] == pytest.approx(1.0)


class TestFastBista:
    def test_first_iterate_matches_plain(self, rng):
        D = random_orthonormal_block_dictionary(8, 4, 2, rng)
        y = rng.standard_normal(8)
        gamma = default_step_size(D)
        a = bista_run(D, y, 1.0, gamma, 1)
        b = fast_bista_run(D, y, 1.0, gamma, 1)
        np.testing.assert_array_equal(a.iterates[1], b.iterates[1])

    def test_zero_data(self, rng):
        D = random_orthonormal_block_dictionary(6, 3, 2, rng)
        trace = fast_bista_run(D, np.zeros(6), 1.0, default_step_size(D), 10)
        np.testing.assert_array_equal(trace.iterates[-1], 0.0)

    def test_beats_plain_at_equal_iterations(self, rng):
        for _ in range(5):
            D = random_orthonormal_block_dictionary(10, 6, 2, rng)
            x_star = np.zeros(12)
            x_star[:4] = rng.standard_normal(4)
            y = D.data @ x_star + 0.01 * rng.standard_normal(10)
            gamma = default_step_size(D)
            plain = bista_run(D, y, 0.5, gamma, 80)
            fast = fast_bista_run(D, y, 0.5, gamma, 80)
            assert fast.objectives[-1] <= plain.objectives[-1] + 1e-10


class TestAlamp:
    def test_reduces_to_bista_without_onsager(self, rng):
        D = random_orthonormal_block_dictionary(8, 4, 2, rng)
        x_star = np.zeros(8)
        x_star[:2] = rng.standard_normal(2)
        y = D.data @ x_star
        gamma = default_step_size(D)
        plain = bista_run(D, y, 1.0, gamma, 30)
        amp = alamp_run(D, D, 1.0 * gamma, gamma, 30, y, onsager=False)
        for xa, xb in zip(amp.iterates, plain.iterates):
            assert np.abs(xa - xb).max() < 1e-12

    def test_zero_measurements_stay_zero(self, rng):
        D = random_orthonormal_block_dictionary(6, 3, 2, rng)
        trace = alamp_run(D, D, 0.5, 0.5, 10, np.zeros(6))
        np.testing.assert_array_equal(trace.iterates[-1], 0.0)

    def test_onsager_changes_trajectory(self, rng):
        D = random_orthonormal_block_dictionary(8, 4, 2, rng)
        y = D.data @ np.concatenate([rng.standard_normal(2), np.zeros(6)])
        gamma = default_step_size(D)
        with_ons = alamp_run(D, D, 0.05, gamma, 10, y, onsager=True)
        without = alamp_run(D, D, 0.05, gamma, 10, y, onsager=False)
        assert np.abs(with_ons.iterates[-1] - without.iterates[-1]).max() > 1e-8


class TestDecorrelation:
    def test_analytic_weights_are_decorrelated(self, rng):
        # the feasibility constraint forces tr(I - B^T D) to vanish
        K = unit_column_matrix(6, 10, rng)
        Kd = BlockDictionary(K, n=10, d=1)
        w = closed_form_weights(Kd)
        assert abs(decorrelation_trace(w.B, Kd)) < 1e-8

    def test_lifted_weights_stay_decorrelated(self, rng):
        K = unit_column_matrix(6, 10, rng)
        w = closed_form_weights(BlockDictionary(K, n=10, d=1))
        d = 3
        D = kron_lift(MMVProblem(K, d))
        B = BlockDictionary(np.kron(w.B.data, np.eye(d)), n=10, d=d)
        assert abs(decorrelation_trace(B, D)) < 1e-8
