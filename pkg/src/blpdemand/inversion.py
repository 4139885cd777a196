"""Share inversion for one market: map observed shares to mean utilities.

Two interchangeable solvers work on the residual system
ln s - ln predicted(delta) = 0: a damped fixed-point sweep (the classic
contraction) and a Newton iteration on the log-share system. Newton is the
default; when its Jacobian is ill-conditioned a single contraction step is
substituted and the event is flagged rather than silently absorbed.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import get_lapack_funcs, lu_factor, lu_solve

from .exceptions import InputError, NonConvergenceError, NumericalError
from .shares import individual_choice_probs, share_log_jacobian
from .types import InversionSettings


class IllConditionedJacobian(NumericalError):
    """The share Jacobian's condition estimate exceeded the configured limit."""


def _validate_shares(shares_t, market=None):
    shares_t = np.asarray(shares_t, dtype=np.float64)
    where = f" in market {market}" if market is not None else ""
    if np.any(shares_t <= 0.0) or np.any(shares_t >= 1.0):
        j = int(np.argmax((shares_t <= 0.0) | (shares_t >= 1.0)))
        raise InputError(f"share for product {j}{where} must lie in (0, 1)")
    if shares_t.sum() >= 1.0:
        raise InputError(f"inside shares{where} leave no outside share")
    return shares_t


def _predicted_log_shares(delta_t, x_t, nu_t, sigma, demo_t, pi, market):
    probs = individual_choice_probs(delta_t, x_t, nu_t, sigma, demo_t, pi, market)
    pred = probs[:, 1:].mean(axis=0)
    if np.any(pred <= 0.0):
        j = int(np.argmax(pred <= 0.0))
        where = f" in market {market}" if market is not None else ""
        raise NumericalError(f"predicted share underflowed for product {j}{where}")
    return np.log(pred), probs


def contraction_step(delta_t, shares_t, x_t, nu_t, sigma, demo_t=None, pi=None,
                     market=None):
    """One fixed-point sweep: delta + ln s - ln predicted(delta)."""
    shares_t = _validate_shares(shares_t, market)
    delta_t = np.asarray(delta_t, dtype=np.float64)
    log_pred, _ = _predicted_log_shares(delta_t, x_t, nu_t, sigma, demo_t, pi,
                                        market)
    return delta_t + np.log(shares_t) - log_pred


def newton_update(delta_t, log_shares_t, x_t, nu_t, sigma, demo_t=None, pi=None,
                  cond_limit=1e12, market=None):
    """One Newton step on the log-share system, shared by every caller.

    Factorizes the share Jacobian once and solves against the residual; the
    explicit inverse is never formed. Raises IllConditionedJacobian when the
    cheap one-norm condition estimate crosses cond_limit.
    """
    delta_t = np.asarray(delta_t, dtype=np.float64)
    log_pred, probs = _predicted_log_shares(delta_t, x_t, nu_t, sigma, demo_t,
                                            pi, market)
    jac = share_log_jacobian(delta_t, x_t, nu_t, sigma, demo_t, pi, market,
                             probs=probs)
    resid = log_shares_t - log_pred
    anorm = np.abs(jac).sum(axis=0).max()
    with np.errstate(all="ignore"):
        lu, piv = lu_factor(jac, check_finite=False)
    gecon = get_lapack_funcs(("gecon",), (jac,))[0]
    rcond, _ = gecon(lu, anorm, norm="1")
    if not np.isfinite(rcond) or rcond < 1.0 / cond_limit:
        where = f" in market {market}" if market is not None else ""
        raise IllConditionedJacobian(
            f"share Jacobian{where} has reciprocal condition estimate {rcond:.3e}"
        )
    return delta_t + lu_solve((lu, piv), resid)


def newton_kantorovich_step(delta_t, shares_t, x_t, nu_t, sigma, demo_t=None,
                            pi=None, cond_limit=1e12, market=None, events=None):
    """One Newton step toward solving ln s = ln predicted(delta).

    Degrades to a contraction step when the Jacobian is ill-conditioned; the
    event is counted in events["newton_fallbacks"] when a dict is supplied.
    """
    shares_t = _validate_shares(shares_t, market)
    try:
        return newton_update(delta_t, np.log(shares_t), x_t, nu_t, sigma,
                             demo_t, pi, cond_limit, market)
    except IllConditionedJacobian:
        if events is not None:
            events["newton_fallbacks"] = events.get("newton_fallbacks", 0) + 1
        return contraction_step(delta_t, shares_t, x_t, nu_t, sigma, demo_t,
                                pi, market)


def solve_delta(shares_t, x_t, nu_t, sigma, demo_t=None, pi=None, settings=None,
                method="newton", delta0=None, market=None, events=None):
    """Solve one market's share system for mean utilities.

    Returns (delta_t, n_iterations). The returned iterate satisfies
    max_j |ln s_j - ln predicted_j| < settings.tol_delta. Iteration starts
    from the zero-dispersion solution ln s - ln s0 unless delta0 is given.
    """
    if settings is None:
        settings = InversionSettings()
    if method not in ("newton", "contraction"):
        raise InputError(f"unknown inversion method {method!r}")
    shares_t = _validate_shares(shares_t, market)
    log_shares_t = np.log(shares_t)
    if delta0 is None:
        delta = log_shares_t - np.log(1.0 - shares_t.sum())
    else:
        delta = np.asarray(delta0, dtype=np.float64).copy()
    max_iter = (settings.max_iter_newton if method == "newton"
                else settings.max_iter_contraction)

    residual = np.inf
    for iteration in range(max_iter + 1):
        log_pred, _ = _predicted_log_shares(delta, x_t, nu_t, sigma, demo_t,
                                            pi, market)
        residual = np.abs(log_shares_t - log_pred).max()
        if residual < settings.tol_delta:
            return delta, iteration
        if iteration == max_iter:
            break
        if method == "newton":
            try:
                delta = newton_update(delta, log_shares_t, x_t, nu_t, sigma,
                                      demo_t, pi, settings.cond_limit, market)
            except IllConditionedJacobian:
                if events is not None:
                    events["newton_fallbacks"] = events.get("newton_fallbacks", 0) + 1
                delta = delta + (log_shares_t - log_pred)
        else:
            delta = delta + (log_shares_t - log_pred)

    where = f" in market {market}" if market is not None else ""
    raise NonConvergenceError(
        f"share inversion{where} stalled at residual {residual:.3e} after "
        f"{max_iter} {method} iterations",
        last_iterate=delta,
        residual_norm=float(residual),
    )
