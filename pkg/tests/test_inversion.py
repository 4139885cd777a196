"""Share-inversion tests: fixed-point and Newton solvers for one market."""

import numpy as np
import numpy.testing as npt
import pytest

from blpdemand.exceptions import InputError, NonConvergenceError, NumericalError
from blpdemand.inversion import (
    contraction_step,
    newton_kantorovich_step,
    solve_delta,
)
from blpdemand.shares import outside_probs, predict_shares
from blpdemand.types import InversionSettings


def market_instance(seed, n_products=4, n_draws=25, n_chars=3, sigma_scale=0.8):
    rng = np.random.default_rng(seed)
    x_t = rng.standard_normal((n_products, n_chars))
    nu_t = rng.standard_normal((n_draws, n_chars))
    sigma = sigma_scale * rng.uniform(0.2, 1.0, n_chars)
    delta_true = rng.standard_normal(n_products) - 1.0
    shares = predict_shares(delta_true, x_t, nu_t, sigma)
    return shares, x_t, nu_t, sigma, delta_true


class TestContractionStep:
    def test_fixed_point_maps_to_itself(self):
        shares, x_t, nu_t, sigma, delta_true = market_instance(0)
        stepped = contraction_step(delta_true, shares, x_t, nu_t, sigma)
        npt.assert_allclose(stepped, delta_true, rtol=0, atol=1e-14)

    def test_scalar_logit_first_step(self):
        # from delta = 0 with target share e/(1+e): 0 + ln s - ln(1/2)
        shares = np.array([0.7310585786300049])
        stepped = contraction_step(np.zeros(1), shares, np.zeros((1, 1)),
                                   np.zeros((3, 1)), np.zeros(1))
        npt.assert_allclose(stepped, [0.37988549304172248], rtol=1e-14)

    def test_residual_monotone_after_first_sweep(self):
        shares, x_t, nu_t, sigma, _ = market_instance(1)
        delta = np.zeros(shares.shape[0])
        log_s = np.log(shares)
        norms = []
        for _ in range(60):
            pred = predict_shares(delta, x_t, nu_t, sigma)
            norms.append(np.abs(log_s - np.log(pred)).max())
            delta = contraction_step(delta, shares, x_t, nu_t, sigma)
        diffs = np.diff(norms[1:])
        assert np.all(diffs <= 1e-14)

    def test_rejects_boundary_share(self):
        with pytest.raises(InputError, match="product 0"):
            contraction_step(np.zeros(1), np.array([1.0]), np.zeros((1, 1)),
                             np.zeros((2, 1)), np.zeros(1))


class TestNewtonKantorovichStep:
    def test_fixed_point_maps_to_itself(self):
        shares, x_t, nu_t, sigma, delta_true = market_instance(2)
        stepped = newton_kantorovich_step(delta_true, shares, x_t, nu_t, sigma)
        npt.assert_allclose(stepped, delta_true, rtol=0, atol=1e-13)

    def test_sigma_zero_logit_start_is_exact(self):
        shares = np.array([0.2, 0.4, 0.1])
        delta0 = np.log(shares) - np.log(1.0 - shares.sum())
        stepped = newton_kantorovich_step(delta0, shares, np.ones((3, 2)),
                                          np.zeros((5, 2)), np.zeros(2))
        npt.assert_allclose(stepped, delta0, rtol=0, atol=1e-14)

    def test_quadratic_convergence_beats_contraction(self):
        shares, x_t, nu_t, sigma, delta_true = market_instance(3)
        delta_n = delta_true + 0.3
        delta_c = delta_true + 0.3
        delta_n = newton_kantorovich_step(delta_n, shares, x_t, nu_t, sigma)
        delta_c = contraction_step(delta_c, shares, x_t, nu_t, sigma)
        err_n = np.abs(delta_n - delta_true).max()
        err_c = np.abs(delta_c - delta_true).max()
        assert err_n < err_c

    def test_ill_conditioned_falls_back_to_contraction(self):
        shares, x_t, nu_t, sigma, delta_true = market_instance(4)
        delta0 = delta_true + 0.2
        events = {}
        # a condition limit barely above one trips the guard on any market
        stepped = newton_kantorovich_step(delta0, shares, x_t, nu_t, sigma,
                                          cond_limit=1.0 + 1e-9, events=events)
        expected = contraction_step(delta0, shares, x_t, nu_t, sigma)
        npt.assert_array_equal(stepped, expected)
        assert events["newton_fallbacks"] == 1


class TestSolveDelta:
    def test_sigma_zero_returns_logit_delta_immediately(self):
        shares = np.array([0.25, 0.15, 0.05])
        expected = np.log(shares) - np.log(1.0 - shares.sum())
        for method in ("newton", "contraction"):
            delta, n_iter = solve_delta(shares, np.ones((3, 2)),
                                        np.zeros((8, 2)), np.zeros(2),
                                        method=method)
            npt.assert_allclose(delta, expected, rtol=0, atol=1e-12)
            assert n_iter == 0

    def test_scalar_logit_unit_delta(self):
        shares = np.array([0.7310585786300049])
        delta, n_iter = solve_delta(shares, np.zeros((1, 1)), np.zeros((4, 1)),
                                    np.zeros(1))
        npt.assert_allclose(delta, [1.0], rtol=0, atol=1e-12)
        assert n_iter == 0

    @pytest.mark.parametrize("method", ["newton", "contraction"])
    def test_round_trip_recovers_delta(self, method):
        for seed in range(5):
            shares, x_t, nu_t, sigma, delta_true = market_instance(seed + 10)
            delta, _ = solve_delta(shares, x_t, nu_t, sigma, method=method)
            npt.assert_allclose(delta, delta_true, rtol=0, atol=1e-10)

    def test_methods_agree(self):
        shares, x_t, nu_t, sigma, _ = market_instance(20, n_products=6)
        d_newton, it_newton = solve_delta(shares, x_t, nu_t, sigma)
        d_contr, it_contr = solve_delta(shares, x_t, nu_t, sigma,
                                        method="contraction")
        npt.assert_allclose(d_newton, d_contr, rtol=0, atol=1e-10)
        assert it_newton < it_contr

    def test_start_does_not_matter(self):
        shares, x_t, nu_t, sigma, delta_true = market_instance(21)
        rng = np.random.default_rng(99)
        solutions = [
            solve_delta(shares, x_t, nu_t, sigma,
                        delta0=rng.normal(scale=2.0, size=shares.shape[0]))[0]
            for _ in range(3)
        ]
        for sol in solutions:
            npt.assert_allclose(sol, solutions[0], rtol=0, atol=1e-9)

    def test_thin_outside_share(self):
        # boundary-ish market: the contraction modulus approaches 1 - s0, so
        # the fixed point needs a raised sweep cap while Newton shrugs
        rng = np.random.default_rng(22)
        n_products = 5
        x_t = rng.standard_normal((n_products, 2))
        nu_t = rng.standard_normal((40, 2))
        sigma = np.array([0.6, 0.4])
        base = np.array([0.4, 0.3, 0.2, 0.05, 0.0499])
        shares = base / base.sum() * 0.999
        settings = InversionSettings(max_iter_contraction=100000)
        d_newton, it_newton = solve_delta(shares, x_t, nu_t, sigma,
                                          settings=settings)
        d_contr, it_contr = solve_delta(shares, x_t, nu_t, sigma,
                                        settings=settings, method="contraction")
        npt.assert_allclose(d_newton, d_contr, rtol=0, atol=1e-8)
        assert it_contr > 5 * it_newton

    def test_non_convergence_carries_last_iterate(self):
        shares, x_t, nu_t, sigma, _ = market_instance(23)
        settings = InversionSettings(max_iter_contraction=2)
        with pytest.raises(NonConvergenceError) as excinfo:
            solve_delta(shares, x_t, nu_t, sigma, settings=settings,
                        method="contraction", delta0=np.zeros(shares.shape[0]))
        err = excinfo.value
        assert err.last_iterate is not None
        assert err.last_iterate.shape == shares.shape
        assert err.residual_norm > 0

    def test_unknown_method_rejected(self):
        shares, x_t, nu_t, sigma, _ = market_instance(24)
        with pytest.raises(InputError, match="unknown inversion method"):
            solve_delta(shares, x_t, nu_t, sigma, method="bisection")

    def test_predicted_share_underflow_is_numerical_error(self):
        # a start so far off that predicted shares vanish for some product
        shares = np.array([0.3, 0.3])
        with pytest.raises((NumericalError, NonConvergenceError)):
            solve_delta(shares, np.ones((2, 1)), np.zeros((3, 1)), np.zeros(1),
                        delta0=np.array([800.0, -800.0]),
                        method="contraction")
