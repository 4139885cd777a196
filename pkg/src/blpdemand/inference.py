"""Asymptotic inference for the pseudo-GMM fixed point.

The estimator holds the outside probabilities fixed while optimizing, so its
sampling variance carries a correction relative to plain GMM: the bread of
the sandwich is Omega_tt + Omega_tl @ Lambda, where Lambda is the Jacobian of
the solved outside probabilities in the parameters. Setting either correction
matrix to zero must collapse the sandwich to the plain-GMM variance exactly;
tests rely on that identity.

A scale note that matters: effective_instruments is defined so that the
criterion gradient is literally the average of z*_jt xi_jt, which puts the
quadratic form's factor two inside z*. The score used for the variance
matrices is half of that, which makes Omega_tt the standard GMM outer
product and the inverse-Omega variance the usual efficient-GMM one. The
second-derivative (Hessian-style) Omega_tt estimator is available behind a
flag; the two differ by construction, not by bug.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import get_lapack_funcs, lu_factor, lu_solve

from .exceptions import InputError, NumericalError
from .gmm import closed_form_delta_all
from .parallel import market_map
from .shares import (
    individual_choice_probs,
    share_log_jacobian,
    share_log_sigma_jacobian,
    taste_shifts,
)
from .types import VarianceReport, split_sigma_part


def _require_converged(fit):
    if not fit.converged:
        raise InputError(
            "variance formulas need a converged fit; this one stopped with: "
            + (fit.message or "no convergence")
        )
    if fit.lambda_hat is None:
        raise InputError("fit carries no outside probabilities")


def _residuals_and_gradients(fit, dataset, threads=1):
    """xi and d xi / d theta' at the fitted point, stacked over observations."""
    theta = fit.theta_hat
    delta, ddelta = closed_form_delta_all(fit.lambda_hat, theta.sigma_part(),
                                          dataset, want_grad=True,
                                          threads=threads)
    xi = delta.reshape(-1) - dataset.x_flat @ theta.beta
    d_theta = np.concatenate(
        [-dataset.x_flat, ddelta.reshape(dataset.n_obs, -1)], axis=1)
    return xi, d_theta


def effective_instruments(fit, dataset, W, threads=1):
    """Instruments that turn the criterion gradient into a plain average.

    Returns (T, J, dim theta) with the property that averaging z*_jt xi_jt
    over observations reproduces the full criterion gradient at the fitted
    point, factor of two from the quadratic form included.
    """
    _require_converged(fit)
    W = np.asarray(W, dtype=np.float64)
    _, d_theta = _residuals_and_gradients(fit, dataset, threads)
    n = dataset.n_obs
    zd = dataset.z_flat.T @ d_theta                    # (q, p)
    zstar = (2.0 / n) * (dataset.z_flat @ (W @ zd))    # (n, p)
    return zstar.reshape(dataset.T, dataset.J, -1)


def _market_lambda_block(fit, dataset, t, sigma, pi, cond_limit=1e12):
    """Lambda rows for one market: d lambda*_i / d theta', beta columns zero."""
    delta_t = fit.delta_hat[t]
    x_t = dataset.x[t]
    nu_t = dataset.nu[t]
    demo_t = dataset.demo_t(t)
    probs = individual_choice_probs(delta_t, x_t, nu_t, sigma, demo_t, pi,
                                    market=t)
    lam_t = probs[:, 0]
    inside = probs[:, 1:]
    jac = share_log_jacobian(delta_t, x_t, nu_t, sigma, demo_t, pi, market=t,
                             probs=probs)
    dlns = share_log_sigma_jacobian(delta_t, x_t, nu_t, sigma, demo_t, pi,
                                    market=t, probs=probs)
    # same guarded factorization the inversion solvers use: a singular system
    # here would turn into silently garbage standard errors
    anorm = np.abs(jac).sum(axis=0).max()
    with np.errstate(all="ignore"):
        lu, piv = lu_factor(jac, check_finite=False)
    gecon = get_lapack_funcs(("gecon",), (jac,))[0]
    rcond, _ = gecon(lu, anorm, norm="1")
    if not np.isfinite(rcond) or rcond < 1.0 / cond_limit:
        raise NumericalError(
            f"share Jacobian in market {t} is singular or nearly so "
            f"(reciprocal condition {rcond:.3e}); cannot propagate the "
            "solved utilities"
        )
    ddelta_star = -lu_solve((lu, piv), dlns)           # (J, p_sigma)
    K = x_t.shape[1]
    R = 0 if pi is None else pi.shape[1]
    p_sigma = K + K * R
    block = np.zeros((nu_t.shape[0], K + p_sigma))
    # indirect channel through delta*(sigma), then the direct channel
    block[:, K:] = -lam_t[:, None] * (inside @ ddelta_star)
    for m in range(K):
        a = nu_t[:, [m]] * x_t[:, m]
        block[:, K + m] -= lam_t * (inside * a).sum(axis=1)
    col = 2 * K
    for k in range(K):
        for r in range(R):
            a = demo_t[:, [r]] * x_t[:, k]
            block[:, col] -= lam_t * (inside * a).sum(axis=1)
            col += 1
    return block, probs


def lambda_jacobian(fit, dataset, threads=1, cond_limit=1e12):
    """Jacobian of the solved outside probabilities in the parameters.

    Rows ordered market-major: row t*N + i is consumer i in market t. The
    beta columns are exactly zero because the solved utilities depend on the
    dispersion block alone.
    """
    _require_converged(fit)
    sigma, pi = split_sigma_part(fit.theta_hat.sigma_part(), dataset.K,
                                 dataset.R)
    p = dataset.K + dataset.K + dataset.K * dataset.R
    out = np.empty((dataset.T * dataset.N, p))

    def task(t):
        block, _ = _market_lambda_block(fit, dataset, t, sigma, pi, cond_limit)
        out[t * dataset.N : (t + 1) * dataset.N] = block

    market_map(task, dataset.T, threads)
    return out


def npgmm_variance(fit, dataset, W, zero_lambda_jacobian=False,
                   zero_cross_term=False, hessian_omega=False, threads=1,
                   cond_limit=1e12):
    """Sandwich variance with the outside-probability correction.

    v_np is the sandwich for the probability-anchored estimator: bread is
    the partial-derivative criterion curvature plus the correction term
    Omega_tl @ Lambda, middle is the partial-score covariance. v_gmm is the
    benchmark variance of the standard estimator whose residual derivatives
    run through the solved probabilities, built from the total-derivative
    curvature and scores. The correction is accumulated market by market as
    dim(theta)-square blocks, never materializing the dense Lambda.

    hessian_omega swaps each middle for its curvature (the two coincide
    asymptotically when the residual has unit variance and the weighting is
    the inverse instrument cross-product); under that flag the sample
    inequality v_np >= v_gmm holds by construction. Either zero_* flag
    removes the correction, collapsing v_np to v_gmm exactly.
    """
    _require_converged(fit)
    W = np.asarray(W, dtype=np.float64)
    n = dataset.n_obs
    theta = fit.theta_hat
    sigma, pi = split_sigma_part(theta.sigma_part(), dataset.K, dataset.R)

    xi, d_theta = _residuals_and_gradients(fit, dataset, threads)
    zd = dataset.z_flat.T @ d_theta
    zstar_half = (1.0 / n) * (dataset.z_flat @ (W @ zd))   # half of z*
    p = zstar_half.shape[1]

    if zero_lambda_jacobian or zero_cross_term:
        cross = np.zeros((p, p))
        zd_total = zd
    else:
        zh = zstar_half.reshape(dataset.T, dataset.J, p)
        per_market = np.empty((dataset.T, p, p))
        zd_extra = np.empty((dataset.T, dataset.q, p))

        def task(t):
            lam_block, probs = _market_lambda_block(fit, dataset, t, sigma, pi,
                                                    cond_limit)
            mu = taste_shifts(dataset.x[t], dataset.nu[t], sigma,
                              dataset.demo_t(t), pi)
            shift = mu.max(axis=0)
            expmu = np.exp(mu - shift)                   # (N, J)
            den = fit.lambda_hat[t] @ expmu              # (J,)
            # d xi_jt / d lambda_it at fixed instruments
            dxi = -(expmu / den).T                       # (J, N)
            correction = dxi @ lam_block                 # (J, p)
            per_market[t] = zh[t].T @ correction
            zd_extra[t] = dataset.z[t].T @ correction

        market_map(task, dataset.T, threads)
        cross = per_market.sum(axis=0) / n
        zd_total = zd + zd_extra.sum(axis=0)

    curvature = (zd.T @ W @ zd) / n**2
    curvature_total = (zd_total.T @ W @ zd_total) / n**2
    if hessian_omega:
        omega_tt = curvature
        omega_total = curvature_total
    else:
        scores = zstar_half * xi[:, None]
        omega_tt = scores.T @ scores / n
        zstar_total = (1.0 / n) * (dataset.z_flat @ (W @ zd_total))
        scores_total = zstar_total * xi[:, None]
        omega_total = scores_total.T @ scores_total / n

    try:
        total_inv = np.linalg.inv(curvature_total)
    except np.linalg.LinAlgError:
        raise NumericalError(
            "criterion curvature is singular: the parameters look weakly "
            "identified at this fit"
        ) from None
    v_gmm = total_inv @ omega_total @ total_inv.T
    if not cross.any():
        # collapse identity must be exact, not within rounding
        v_np = v_gmm.copy()
    else:
        try:
            corrected_inv = np.linalg.inv(curvature + cross)
        except np.linalg.LinAlgError:
            raise NumericalError(
                "corrected curvature is singular: the parameters look "
                "weakly identified at this fit"
            ) from None
        v_np = corrected_inv @ omega_tt @ corrected_inv.T
    return VarianceReport(
        v_np=v_np,
        v_gmm=v_gmm,
        omega_tt=omega_tt,
        omega_tl_times_lambda=cross,
        se_np=np.sqrt(np.diag(v_np) / n),
        se_gmm=np.sqrt(np.diag(v_gmm) / n),
    )
