"""Market-level demand kernels.

Everything here works on a single market: choice probabilities, predicted
shares, outside-option probabilities, the product-separable inversion that
maps observed shares and outside probabilities straight to mean utilities,
and the derivative blocks the estimators consume.

Consumer draws are treated as fixed and known, so a "share" always means the
average over the market's stored draws, never an integral.
"""

from __future__ import annotations

import numpy as np

from .exceptions import InputError, NumericalError

# Interior averages below this are treated as underflow rather than rounded on.
UNDERFLOW_FLOOR = 1e-300


def taste_shifts(x_t, nu_t, sigma, demo_t=None, pi=None):
    """Consumer-by-product deviations from mean utility, an (N, J) matrix.

    Entry (i, j) is sum_k x_jt^k (sigma^k nu_it^k + d_it' pi^k).
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    nu_t = np.asarray(nu_t, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if x_t.ndim != 2 or nu_t.ndim != 2:
        raise InputError("x_t and nu_t must be matrices")
    if x_t.shape[1] != nu_t.shape[1] or sigma.shape != (x_t.shape[1],):
        raise InputError(
            f"characteristic counts disagree: x {x_t.shape}, nu {nu_t.shape}, "
            f"sigma {sigma.shape}"
        )
    mu = (nu_t * sigma) @ x_t.T
    if pi is not None and np.asarray(pi).size:
        if demo_t is None:
            raise InputError("pi provided without demographic draws")
        demo_t = np.asarray(demo_t, dtype=np.float64)
        mu += (demo_t @ np.asarray(pi, dtype=np.float64).T) @ x_t.T
    return mu


def individual_choice_probs(delta_t, x_t, nu_t, sigma, demo_t=None, pi=None,
                            market=None):
    """Choice probabilities for every stored consumer, an (N, J+1) matrix.

    Column 0 is the outside option. Rows sum to one. Utilities are shifted by
    each consumer's running maximum before exponentiation so large mean
    utilities cannot overflow.
    """
    delta_t = np.asarray(delta_t, dtype=np.float64)
    mu = taste_shifts(x_t, nu_t, sigma, demo_t, pi)
    util = delta_t + mu
    if not np.all(np.isfinite(util)):
        i, j = np.argwhere(~np.isfinite(util))[0]
        where = f" in market {market}" if market is not None else ""
        raise NumericalError(
            f"non-finite utility for consumer {i}, product {j}{where}"
        )
    # The outside option has utility zero, so the shift must cover it too.
    shift = np.maximum(util.max(axis=1), 0.0)
    expu = np.exp(util - shift[:, None])
    denom = np.exp(-shift) + expu.sum(axis=1)
    probs = np.empty((util.shape[0], util.shape[1] + 1))
    probs[:, 0] = np.exp(-shift) / denom
    probs[:, 1:] = expu / denom[:, None]
    return probs


def predict_shares(delta_t, x_t, nu_t, sigma, demo_t=None, pi=None, market=None):
    """Predicted inside shares: the average choice probability per product."""
    probs = individual_choice_probs(delta_t, x_t, nu_t, sigma, demo_t, pi, market)
    return probs[:, 1:].mean(axis=0)


def outside_probs(delta_t, x_t, nu_t, sigma, demo_t=None, pi=None, market=None):
    """Each consumer's outside-option probability, an (N,) vector."""
    probs = individual_choice_probs(delta_t, x_t, nu_t, sigma, demo_t, pi, market)
    return probs[:, 0]


def h_function(lambda_t, x_t, nu_t, sigma, demo_t=None, pi=None, market=None):
    """Log of the outside-weighted average taste exponential, a (J,) vector.

    h_j = ln((1/N) sum_i lambda_i exp(mu_ij)) with mu the taste shifts. Each
    product's exponent is shifted by its own column maximum; the shift cancels
    exactly when it is added back outside the log.
    """
    lambda_t = np.asarray(lambda_t, dtype=np.float64)
    if lambda_t.ndim != 1:
        raise InputError("lambda_t must be a vector")
    if np.any(lambda_t <= 0.0) or np.any(lambda_t >= 1.0):
        i = int(np.argmax((lambda_t <= 0.0) | (lambda_t >= 1.0)))
        where = f" in market {market}" if market is not None else ""
        raise InputError(
            f"outside probabilities must lie strictly inside (0, 1); consumer "
            f"{i}{where} has {lambda_t[i]!r}"
        )
    mu = taste_shifts(x_t, nu_t, sigma, demo_t, pi)
    if lambda_t.shape[0] != mu.shape[0]:
        raise InputError(
            f"lambda_t has {lambda_t.shape[0]} entries for {mu.shape[0]} consumers"
        )
    shift = mu.max(axis=0)
    avg = (lambda_t @ np.exp(mu - shift)) / lambda_t.shape[0]
    if np.any(avg < UNDERFLOW_FLOOR):
        j = int(np.argmax(avg < UNDERFLOW_FLOOR))
        where = f" in market {market}" if market is not None else ""
        raise NumericalError(
            f"interior average underflowed for product {j}{where}"
        )
    return shift + np.log(avg)


def closed_form_delta(shares_t, lambda_t, x_t, nu_t, sigma, demo_t=None, pi=None,
                      market=None):
    """Mean utilities from observed shares at given outside probabilities.

    delta_j = ln(s_j) - h_j(lambda). Product-separable: no fixed point, one
    pass over the draws.
    """
    shares_t = np.asarray(shares_t, dtype=np.float64)
    if np.any(shares_t <= 0.0) or np.any(shares_t >= 1.0):
        raise InputError("shares must lie strictly inside (0, 1)")
    h = h_function(lambda_t, x_t, nu_t, sigma, demo_t, pi, market)
    return np.log(shares_t) - h


def share_log_jacobian(delta_t, x_t, nu_t, sigma, demo_t=None, pi=None,
                       market=None, probs=None):
    """Jacobian of log predicted shares in mean utilities, a (J, J) matrix.

    Entry (j, l) is (1/(N s_j)) sum_i p_ij (1{j=l} - p_il). With zero taste
    dispersion this collapses to 1{j=l} - s_l. Pass probs to reuse an already
    computed probability matrix.
    """
    if probs is None:
        probs = individual_choice_probs(delta_t, x_t, nu_t, sigma, demo_t, pi,
                                        market)
    inside = probs[:, 1:]
    n_draws = inside.shape[0]
    s = inside.mean(axis=0)
    if np.any(s <= 0.0):
        j = int(np.argmax(s <= 0.0))
        where = f" in market {market}" if market is not None else ""
        raise NumericalError(f"predicted share underflowed for product {j}{where}")
    cross = inside.T @ inside
    jac = np.diag(inside.sum(axis=0)) - cross
    jac /= n_draws * s[:, None]
    return jac


def delta_param_gradients(shares_t, lambda_t, x_t, nu_t, sigma, demo_t=None,
                          pi=None, market=None):
    """Derivatives of the closed-form delta in the dispersion parameters.

    Returns (J, K + K*R): columns for each sigma^k, then each pi entry in
    row-major order, holding the outside probabilities fixed. The observed
    shares drop out of the derivative, so shares_t only participates in
    validation.
    """
    shares_t = np.asarray(shares_t, dtype=np.float64)
    if np.any(shares_t <= 0.0) or np.any(shares_t >= 1.0):
        raise InputError("shares must lie strictly inside (0, 1)")
    lambda_t = np.asarray(lambda_t, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    mu = taste_shifts(x_t, nu_t, sigma, demo_t, pi)
    shift = mu.max(axis=0)
    weights = lambda_t[:, None] * np.exp(mu - shift)
    den = weights.sum(axis=0)
    if np.any(den / lambda_t.shape[0] < UNDERFLOW_FLOOR):
        j = int(np.argmax(den / lambda_t.shape[0] < UNDERFLOW_FLOOR))
        where = f" in market {market}" if market is not None else ""
        raise NumericalError(f"interior average underflowed for product {j}{where}")
    nu_t = np.asarray(nu_t, dtype=np.float64)
    K = x_t.shape[1]
    R = 0 if pi is None else np.asarray(pi).shape[1]
    out = np.empty((x_t.shape[0], K + K * R))
    # d delta_j / d sigma_k = -x_jk * sum_i w_ij nu_ik / sum_i w_ij
    out[:, :K] = -x_t * ((weights.T @ nu_t) / den[:, None])
    if R > 0:
        demo_t = np.asarray(demo_t, dtype=np.float64)
        ratios = (weights.T @ demo_t) / den[:, None]      # (J, R)
        for k in range(K):
            out[:, K + k * R : K + (k + 1) * R] = -x_t[:, [k]] * ratios
    return out


def share_log_sigma_jacobian(delta_t, x_t, nu_t, sigma, demo_t=None, pi=None,
                             market=None, probs=None):
    """Derivatives of log predicted shares in the dispersion parameters.

    Returns (J, K + K*R) at fixed mean utilities:
    d ln s_j / d sigma_k = (1/(N s_j)) sum_i p_ij (a_ij - sum_l p_il a_il)
    with a_ij = x_jk nu_ik, and the matching expression with demographics for
    the pi columns.
    """
    if probs is None:
        probs = individual_choice_probs(delta_t, x_t, nu_t, sigma, demo_t, pi,
                                        market)
    inside = probs[:, 1:]
    n_draws = inside.shape[0]
    s = inside.mean(axis=0)
    if np.any(s <= 0.0):
        j = int(np.argmax(s <= 0.0))
        where = f" in market {market}" if market is not None else ""
        raise NumericalError(f"predicted share underflowed for product {j}{where}")
    x_t = np.asarray(x_t, dtype=np.float64)
    nu_t = np.asarray(nu_t, dtype=np.float64)
    K = x_t.shape[1]
    R = 0 if pi is None else np.asarray(pi).shape[1]
    out = np.empty((x_t.shape[0], K + K * R))
    for k in range(K):
        a = nu_t[:, [k]] * x_t[:, k]                     # (N, J)
        centered = a - (inside * a).sum(axis=1, keepdims=True)
        out[:, k] = (inside * centered).sum(axis=0) / (n_draws * s)
    if R > 0:
        demo_t = np.asarray(demo_t, dtype=np.float64)
        col = K
        for k in range(K):
            for r in range(R):
                a = demo_t[:, [r]] * x_t[:, k]
                centered = a - (inside * a).sum(axis=1, keepdims=True)
                out[:, col] = (inside * centered).sum(axis=0) / (n_draws * s)
                col += 1
    return out
