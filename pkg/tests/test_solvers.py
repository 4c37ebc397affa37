import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cepramus.errors import HyperparameterError
from cepramus.forward import build_leadfield, simulate_measurement, NoiseSpec
from cepramus.model import HyperParams, Updater
from cepramus.solvers import (
    gamma_update_em,
    gamma_update_ias,
    lasso_objective,
    log_marginal_posterior,
    run_cep,
    solve_lasso_irls,
    solve_weighted_ridge,
)

from oracles import (
    lasso_coordinate_descent,
    lasso_objective_value,
    ridge_normal_equations,
)


def hp(q=1, kappa=4.4, theta=1e-3, sigma=0.05, **kw):
    return HyperParams(q=q, kappa=kappa, theta=theta, sigma=sigma, **kw)


class TestGammaUpdates:
    def test_em_at_zero_q1(self):
        g = gamma_update_em(np.zeros(3), hp(q=1, kappa=4.4, theta=1e-3))
        np.testing.assert_allclose(g, 5400.0, rtol=1e-14)

    def test_em_at_zero_q2(self):
        g = gamma_update_em(np.zeros(2), hp(q=2, kappa=4.4, theta=1e-6))
        np.testing.assert_allclose(g, 4.9e6, rtol=1e-14)

    def test_em_direct_substitution(self):
        g = gamma_update_em(np.array([1e-3]), hp(q=1, kappa=4.4, theta=1e-3))
        np.testing.assert_allclose(g, 2700.0, rtol=1e-14)

    def test_ias_at_zero_q1(self):
        g = gamma_update_ias(np.zeros(1), hp(q=1, kappa=4.4, theta=1e-3))
        np.testing.assert_allclose(g, 4400.0, rtol=1e-14)

    def test_ias_direct_substitution_q2(self):
        g = gamma_update_ias(np.array([1e-3]), hp(q=2, kappa=4.4, theta=1e-6))
        np.testing.assert_allclose(g, 1.95e6, rtol=1e-14)

    def test_numerators_differ_by_exactly_one(self):
        for q in (1, 2):
            kappa = 3.7
            em_numerator = kappa + 1.0 / q
            ias_numerator = kappa + 1.0 / q - 1.0
            assert em_numerator - ias_numerator == 1.0

    def test_update_difference_identity(self, rng):
        x = rng.standard_normal(100)
        for q in (1, 2):
            params = hp(q=q, kappa=2.3, theta=0.02)
            diff = gamma_update_em(x, params) - gamma_update_ias(x, params)
            np.testing.assert_allclose(diff, 1.0 / (0.02 + np.abs(x) ** q),
                                       rtol=1e-13)

    def test_ias_mode_undefined(self):
        bad = SimpleNamespace(q=2, kappa=0.4, theta=1e-3)
        with pytest.raises(HyperparameterError):
            gamma_update_ias(np.zeros(2), bad)

    @given(a=st.floats(0, 10), b=st.floats(0, 10))
    @settings(max_examples=50, deadline=None)
    def test_monotone_nonincreasing_in_magnitude(self, a, b):
        lo, hi = sorted((a, b))
        for q in (1, 2):
            params = hp(q=q, kappa=4.4, theta=1e-3)
            assert gamma_update_em(np.array([hi]), params) <= gamma_update_em(
                np.array([lo]), params)
            assert gamma_update_ias(np.array([hi]), params) <= gamma_update_ias(
                np.array([lo]), params)


class TestWeightedRidge:
    def test_identity_leadfield_closed_form(self):
        y = np.array([1.0, -2.0, 0.5])
        gamma = np.full(3, 0.8)
        x = solve_weighted_ridge(np.eye(3), y, gamma, sigma=1.0)
        np.testing.assert_allclose(x, y / (1.0 + 2.0 * 0.8), rtol=1e-14)

    def test_infinite_penalty_limit(self, rng):
        gain = rng.standard_normal((6, 10))
        y = rng.standard_normal(6)
        x = solve_weighted_ridge(gain, y, np.full(10, 1e14), sigma=1.0)
        assert np.abs(x).max() < 1e-10

    def test_matches_normal_equations_oracle(self, rng):
        gain = rng.standard_normal((8, 20))
        y = rng.standard_normal(8)
        gamma = rng.uniform(0.1, 4.0, 20)
        x = solve_weighted_ridge(gain, y, gamma, sigma=0.5)
        x_ref = ridge_normal_equations(gain, y, gamma, 0.5)
        assert np.abs(x - x_ref).max() <= 1e-10 * np.abs(x_ref).max()

    def test_dual_and_primal_agree(self, rng):
        # underdetermined uses the m-by-m form, overdetermined the
        # normal equations; an exactly determined border case hits both
        gain = rng.standard_normal((12, 30))
        y = rng.standard_normal(12)
        gamma = rng.uniform(0.2, 2.0, 30)
        dual = solve_weighted_ridge(gain, y, gamma, sigma=0.3)
        primal = ridge_normal_equations(gain, y, gamma, 0.3)
        assert np.abs(dual - primal).max() <= 1e-8 * np.abs(primal).max()

    def test_stationarity(self, rng):
        gain = rng.standard_normal((10, 24))
        y = rng.standard_normal(10)
        gamma = rng.uniform(0.1, 3.0, 24)
        sigma = 0.4
        x = solve_weighted_ridge(gain, y, gamma, sigma)
        grad = gain.T @ (gain @ x - y) / sigma ** 2 + 2.0 * gamma * x
        scale = np.linalg.norm(gain.T @ y / sigma ** 2)
        assert np.linalg.norm(grad) < 1e-8 * scale

    def test_permutation_equivariance(self, rng):
        gain = rng.standard_normal((7, 15))
        y = rng.standard_normal(7)
        gamma = rng.uniform(0.5, 2.0, 15)
        perm = rng.permutation(15)
        x = solve_weighted_ridge(gain, y, gamma, sigma=1.0)
        x_perm = solve_weighted_ridge(gain[:, perm], y, gamma[perm], sigma=1.0)
        np.testing.assert_allclose(x_perm, x[perm], rtol=1e-10, atol=1e-14)

    def test_bit_determinism(self, rng):
        gain = rng.standard_normal((9, 21))
        y = rng.standard_normal(9)
        gamma = rng.uniform(0.5, 2.0, 21)
        a = solve_weighted_ridge(gain, y, gamma, sigma=0.7)
        b = solve_weighted_ridge(gain.copy(), y.copy(), gamma.copy(), sigma=0.7)
        np.testing.assert_array_equal(a, b)

    def test_rejects_nonpositive_gamma(self):
        with pytest.raises(ValueError):
            solve_weighted_ridge(np.eye(2), np.ones(2), np.array([1.0, 0.0]), 1.0)


class TestLassoIrls:
    def test_soft_threshold_above(self):
        x = solve_lasso_irls(np.eye(1), np.array([1.0]), np.array([0.3]),
                             sigma=1.0, iters=15)
        assert abs(x[0] - 0.7) < 1e-6

    def test_soft_threshold_below_shrinks_to_zero(self):
        x = solve_lasso_irls(np.eye(1), np.array([0.2]), np.array([0.3]),
                             sigma=1.0, iters=200)
        assert abs(x[0]) < 1e-6

    def test_matches_coordinate_descent_objective(self, rng):
        gain = rng.standard_normal((10, 30))
        y = rng.standard_normal(10)
        gamma = rng.uniform(0.2, 1.0, 30)
        sigma = 1.0
        x = solve_lasso_irls(gain, y, gamma, sigma, iters=400,
                             park_sigma_scaling=False)
        x_cd = lasso_coordinate_descent(gain, y, gamma, sigma)
        f = lasso_objective_value(gain, y, x, gamma, sigma)
        f_cd = lasso_objective_value(gain, y, x_cd, gamma, sigma)
        assert f <= f_cd * (1.0 + 1e-6)
        assert abs(f - f_cd) <= 1e-6 * abs(f_cd)

    def test_objective_monotone_nonincreasing(self, rng):
        gain = rng.standard_normal((8, 16))
        y = rng.standard_normal(8)
        gamma = rng.uniform(0.2, 1.5, 16)
        _, objectives = solve_lasso_irls(gain, y, gamma, sigma=0.8, iters=60,
                                         return_objectives=True)
        diffs = np.diff(objectives)
        assert np.all(diffs <= 1e-12)

    def test_park_scaling_divides_by_sigma(self, rng):
        gain = rng.standard_normal((5, 9))
        y = rng.standard_normal(5)
        gamma = rng.uniform(0.5, 1.5, 9)
        sigma = 0.5
        scaled = solve_lasso_irls(gain, y, gamma, sigma, iters=50,
                                  park_sigma_scaling=True)
        manual = solve_lasso_irls(gain, y, gamma / sigma, sigma, iters=50,
                                  park_sigma_scaling=False)
        np.testing.assert_array_equal(scaled, manual)


class TestRunCep:
    def test_zero_data_keeps_zero_estimate(self):
        gain = np.random.default_rng(0).standard_normal((6, 12))
        params = hp(q=2, theta=1e-6, sigma=0.1, updater=Updater.EM)
        result = run_cep(gain, np.zeros(6), params)
        np.testing.assert_array_equal(result.estimate, np.zeros(12))
        np.testing.assert_allclose(result.gamma, 4.9e6, rtol=1e-14)
        assert len(result.trace) == params.outer_iters

    def test_single_dipole_argmax_exhaustive(self, small_sphere):
        # noiseless single-source data: the amplitude peak must sit on
        # the generating source, checked against every other source
        _, space, _, leadfield = small_sphere
        rng = np.random.default_rng(77)
        for true_idx in rng.choice(space.n_sources, size=4, replace=False):
            coeffs = np.zeros(leadfield.n_cols)
            coeffs[3 * true_idx:3 * true_idx + 3] = 1e-8 * np.array([0.2, 0.3, 0.93])
            y = leadfield.gain @ coeffs
            y_scaled = y / np.abs(y).max()
            params = hp(q=2, theta=1e-6, sigma=0.03, updater=Updater.EM)
            result = run_cep(leadfield.gain, y_scaled, params)
            amps = np.linalg.norm(result.estimate.reshape(-1, 3), axis=1)
            assert int(np.argmax(amps)) == int(true_idx)

    @pytest.mark.parametrize("q,theta", [(1, 1e-3), (2, 1e-6)])
    def test_em_log_posterior_nondecreasing(self, small_sphere, q, theta):
        _, space, _, leadfield = small_sphere
        sim = simulate_measurement(
            leadfield,
            _point_config(space, 12),
            NoiseSpec(rel_std=0.05, seed=5),
        )
        params = hp(q=q, theta=theta, sigma=0.05, updater=Updater.EM,
                    park_sigma_scaling=False)
        result = run_cep(leadfield.gain, sim.measurement.values, params)
        increments = np.diff(result.trace.log_posterior)
        scale = max(1.0, np.abs(result.trace.log_posterior).max())
        assert np.all(increments >= -1e-10 * scale)

    def test_gamma_init_changes_first_step(self, rng):
        gain = rng.standard_normal((6, 10))
        y = rng.standard_normal(6)
        params = hp(q=2, theta=1e-2, sigma=0.5, outer_iters=1)
        warm = run_cep(gain, y, params, gamma_init=np.full(10, 1e-4))
        cold = run_cep(gain, y, params)
        assert not np.allclose(warm.estimate, cold.estimate)

    def test_ias_trace_has_nan_log_posterior(self, rng):
        gain = rng.standard_normal((5, 8))
        y = rng.standard_normal(5)
        params = hp(q=2, theta=1e-4, sigma=0.3, updater=Updater.IAS)
        result = run_cep(gain, y, params)
        assert np.all(np.isnan(result.trace.log_posterior))
        assert np.all(np.isfinite(result.trace.misfit))

    def test_early_stop_tolerance(self, rng):
        gain = rng.standard_normal((6, 9))
        y = rng.standard_normal(6)
        params = hp(q=2, theta=1e-4, sigma=0.3)
        result = run_cep(gain, y, params, step_tol=1e30)
        assert len(result.trace) == 1

    def test_determinism(self, small_sphere):
        _, space, _, leadfield = small_sphere
        sim = simulate_measurement(leadfield, _point_config(space, 3),
                                   NoiseSpec(rel_std=0.05, seed=9))
        params = hp(q=1, sigma=0.05)
        a = run_cep(leadfield.gain, sim.measurement.values, params)
        b = run_cep(leadfield.gain, sim.measurement.values, params)
        np.testing.assert_array_equal(a.estimate, b.estimate)


class TestLogMarginalPosterior:
    def test_matches_direct_formula(self, rng):
        gain = rng.standard_normal((4, 6))
        y = rng.standard_normal(4)
        x = rng.standard_normal(6)
        params = hp(q=1, kappa=3.0, theta=0.1, sigma=0.5)
        got = log_marginal_posterior(gain, y, x, params)
        resid = gain @ x - y
        log_lik = -0.5 / 0.25 * resid @ resid
        # q=1 marginal density normalizer: kappa / (2 theta)
        log_prior = 6 * math.log(3.0 / 0.2) - 4.0 * np.sum(
            np.log1p(np.abs(x) / 0.1))
        assert got == pytest.approx(log_lik + log_prior, rel=1e-12)

    def test_q2_normalizer_matches_quadrature(self):
        from scipy.integrate import quad

        kappa, theta = 4.4, 1e-2
        density = lambda t: (1 + t * t / theta) ** -(kappa + 0.5)  # noqa: E731
        mass, _ = quad(density, -np.inf, np.inf)
        params = hp(q=2, kappa=kappa, theta=theta, sigma=1.0)
        got = log_marginal_posterior(np.zeros((1, 1)), np.zeros(1),
                                     np.zeros(1), params)
        assert got == pytest.approx(-math.log(mass), rel=1e-9)


def _point_config(space, idx):
    from cepramus.model import Dipole, DipoleConfig

    return DipoleConfig(dipoles=(
        Dipole(position=space.positions[idx], moment=np.array([0.0, 0.0, 1.0]),
               amplitude=1e-8),
    ))
