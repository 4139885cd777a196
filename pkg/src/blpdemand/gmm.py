"""Moment construction, criterion functions, and the inner minimizer.

Three criteria share one quadratic-form backbone:

* the exact criterion, which inverts the share system at every parameter
  trial (the fixed-point estimator's objective);
* the pseudo-criterion at fixed outside probabilities, whose residuals come
  from the closed-form inversion (no fixed point anywhere);
* the pseudo-criterion at a fixed mean-utility anchor, whose residuals come
  from one Newton step off that anchor.

The linear parameters are concentrated out of every minimization: for each
trial of the dispersion parameters, beta is the linear instrumental-variable
solution, and gradients carry the matching projection.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, get_lapack_funcs, lu_factor, lu_solve, qr
from scipy.optimize import minimize

from .exceptions import InputError, NonConvergenceError, NumericalError
from .inversion import (
    IllConditionedJacobian,
    newton_kantorovich_step,
    newton_update,
    solve_delta,
)
from .parallel import market_map
from .shares import (
    individual_choice_probs,
    share_log_jacobian,
    share_log_sigma_jacobian,
    taste_shifts,
    UNDERFLOW_FLOOR,
)
from .types import InversionSettings, ModelParameters, SolverConfig, split_sigma_part


def build_weight_matrix(dataset, kind="two_stage"):
    """Moment weighting: scaled inverse instrument cross-product, or identity.

    The two-stage matrix is ((1/(JT)) Z'Z)^{-1}. A rank-deficient instrument
    set is rejected with the offending columns named.
    """
    q = dataset.q
    if kind == "identity":
        return np.eye(q)
    if kind != "two_stage":
        raise InputError(f"unknown weight matrix kind {kind!r}")
    z = dataset.z_flat
    m = (z.T @ z) / dataset.n_obs
    try:
        factor = cho_factor(m)
    except np.linalg.LinAlgError:
        _, r, perm = qr(m, pivoting=True)
        diag = np.abs(np.diag(r))
        tol = diag.max() * m.shape[0] * np.finfo(np.float64).eps
        bad = sorted(int(c) for c in perm[diag <= tol])
        raise InputError(
            f"instrument matrix is rank deficient; columns {bad} are "
            "collinear with the rest"
        ) from None
    w = cho_solve(factor, np.eye(q))
    return (w + w.T) / 2.0


def linear_iv_gmm_beta(delta, dataset, W):
    """Linear-parameter estimate at given mean utilities.

    beta = (X'ZWZ'X)^{-1} X'ZWZ'delta, stacked over markets.
    """
    delta_flat = np.asarray(delta, dtype=np.float64).reshape(dataset.n_obs)
    ctx = MomentContext(dataset, W)
    return ctx.beta_from_delta(delta_flat)


def sample_moments(xi, dataset):
    """Average instrument-weighted residuals: (1/(JT)) sum z_jt xi_jt."""
    xi_flat = np.asarray(xi, dtype=np.float64).reshape(dataset.n_obs)
    return dataset.z_flat.T @ xi_flat / dataset.n_obs


class MomentContext:
    """Precomputed projections for one (dataset, weight matrix) pair.

    With B = Z'X and A = B'WB: beta(delta) = A^{-1} B'W (Z'delta), and the
    instrument-space residual projector I - B A^{-1} B'W maps Z'delta straight
    to Z'xi at the concentrated beta.
    """

    def __init__(self, dataset, W):
        self.dataset = dataset
        self.W = np.asarray(W, dtype=np.float64)
        if self.W.shape != (dataset.q, dataset.q):
            raise InputError(
                f"weight matrix has shape {self.W.shape}, expected "
                f"({dataset.q}, {dataset.q})"
            )
        z = dataset.z_flat
        self.B = z.T @ dataset.x_flat                  # (q, K)
        self.scale = 1.0 / dataset.n_obs ** 2
        self._C = None
        self._Pq = None

    # concentration is lazy: gradient evaluation at a caller-supplied beta
    # never touches it, and it fails loudly only when actually needed
    def _concentrate(self):
        if self._C is None:
            bw = self.B.T @ self.W                     # (K, q)
            A = bw @ self.B
            try:
                factor = cho_factor(A)
            except np.linalg.LinAlgError:
                raise InputError(
                    "X'ZWZ'X is singular: characteristics are collinear "
                    "after projection on the instruments"
                ) from None
            self._C = cho_solve(factor, bw)            # (K, q)
            self._Pq = np.eye(self.dataset.q) - self.B @ self._C

    @property
    def C(self):
        self._concentrate()
        return self._C

    @property
    def Pq(self):
        self._concentrate()
        return self._Pq

    def beta_from_delta(self, delta_flat):
        return self.C @ (self.dataset.z_flat.T @ delta_flat)

    def value_beta_grad(self, delta_flat, ddelta_flat=None):
        """Criterion value, concentrated beta, and optional sigma-part gradient."""
        u = self.dataset.z_flat.T @ delta_flat
        zxi = self.Pq @ u
        wzxi = self.W @ zxi
        value = float(zxi @ wzxi) * self.scale
        beta = self.C @ u
        if ddelta_flat is None:
            return value, beta, None
        v = self.dataset.z_flat.T @ ddelta_flat        # (q, p)
        grad = 2.0 * self.scale * ((self.Pq @ v).T @ wzxi)
        return value, beta, grad

    def value_and_grad_at_beta(self, xi_flat, dxi_flat=None):
        """Criterion value at explicit residuals, plus gradient blocks."""
        zxi = self.dataset.z_flat.T @ xi_flat
        wzxi = self.W @ zxi
        value = float(zxi @ wzxi) * self.scale
        if dxi_flat is None:
            return value, None
        v = self.dataset.z_flat.T @ dxi_flat
        return value, 2.0 * self.scale * (v.T @ wzxi)


def _check_lambda(lam, dataset):
    lam = np.asarray(lam, dtype=np.float64)
    if lam.shape != (dataset.T, dataset.N):
        raise InputError(
            f"outside probabilities have shape {lam.shape}, expected "
            f"({dataset.T}, {dataset.N})"
        )
    if np.any(lam <= 0.0) or np.any(lam >= 1.0):
        t, i = np.argwhere((lam <= 0.0) | (lam >= 1.0))[0]
        raise InputError(
            f"outside probability for consumer {i} in market {t} must lie "
            "strictly inside (0, 1)"
        )
    return lam


def _closed_form_market(log_shares_t, lam_t, x_t, nu_t, sigma, demo_t, pi,
                        want_grad, market=None):
    """Closed-form delta and, optionally, its dispersion gradient, fused."""
    mu = taste_shifts(x_t, nu_t, sigma, demo_t, pi)
    shift = mu.max(axis=0)
    weights = lam_t[:, None] * np.exp(mu - shift)
    den = weights.sum(axis=0)
    n_draws = lam_t.shape[0]
    avg = den / n_draws
    if np.any(avg < UNDERFLOW_FLOOR):
        j = int(np.argmax(avg < UNDERFLOW_FLOOR))
        where = f" in market {market}" if market is not None else ""
        raise NumericalError(f"interior average underflowed for product {j}{where}")
    delta = log_shares_t - (shift + np.log(avg))
    if not want_grad:
        return delta, None
    K = x_t.shape[1]
    R = 0 if pi is None else pi.shape[1]
    grad = np.empty((x_t.shape[0], K + K * R))
    grad[:, :K] = -x_t * ((weights.T @ nu_t) / den[:, None])
    if R > 0:
        ratios = (weights.T @ demo_t) / den[:, None]
        for k in range(K):
            grad[:, K + k * R : K + (k + 1) * R] = -x_t[:, [k]] * ratios
    return delta, grad


def _ablp_market(log_shares_t, delta0_t, x_t, nu_t, sigma, demo_t, pi,
                 want_grad, cond_limit, market=None):
    """One Newton step off the anchor and its dispersion derivative.

    The derivative differentiates the whole Newton map in the dispersion
    parameters at fixed anchor, which requires the derivative of the share
    Jacobian itself: the expensive part of this criterion.
    """
    probs = individual_choice_probs(delta0_t, x_t, nu_t, sigma, demo_t, pi,
                                    market)
    inside = probs[:, 1:]
    n_draws = inside.shape[0]
    s = inside.mean(axis=0)
    if np.any(s <= 0.0):
        j = int(np.argmax(s <= 0.0))
        where = f" in market {market}" if market is not None else ""
        raise NumericalError(f"predicted share underflowed for product {j}{where}")
    jac = share_log_jacobian(delta0_t, x_t, nu_t, sigma, demo_t, pi, market,
                             probs=probs)
    resid = log_shares_t - np.log(s)
    anorm = np.abs(jac).sum(axis=0).max()
    with np.errstate(all="ignore"):
        lu = lu_factor(jac, check_finite=False)
    gecon = get_lapack_funcs(("gecon",), (jac,))[0]
    rcond, _ = gecon(lu[0], anorm, norm="1")
    if not np.isfinite(rcond) or rcond < 1.0 / cond_limit:
        where = f" in market {market}" if market is not None else ""
        raise IllConditionedJacobian(
            f"share Jacobian{where} has reciprocal condition estimate "
            f"{rcond:.3e}; the one-step map has no fallback"
        )
    step = lu_solve(lu, resid)
    psi = delta0_t + step
    if not want_grad:
        return psi, None

    K = x_t.shape[1]
    R = 0 if pi is None else pi.shape[1]
    J = x_t.shape[0]
    # utility derivatives for all dispersion parameters at once, so the
    # Jacobian chain rule runs as batched matmuls and one multi-rhs solve
    a_all = np.empty((K + K * R, n_draws, J))
    for k in range(K):
        a_all[k] = nu_t[:, [k]] * x_t[:, k]
    if R > 0:
        col = K
        for k in range(K):
            for r in range(R):
                a_all[col] = demo_t[:, [r]] * x_t[:, k]
                col += 1
    rowsum = np.einsum("nj,pnj->pn", inside, a_all)
    dprob = inside[None] * (a_all - rowsum[:, :, None])
    colsum = dprob.sum(axis=1)
    ds = colsum / n_draws
    # inside' dprob is the transpose of dprob' inside; one GEMM covers both
    d1 = np.matmul(dprob.transpose(0, 2, 1), inside)
    dh = -(d1 + d1.transpose(0, 2, 1))
    diag = np.arange(J)
    dh[:, diag, diag] += colsum
    dh /= n_draws
    djac = (dh - jac[None] * ds[:, :, None]) / s[None, :, None]
    rhs = np.matmul(djac, step) + ds / s[None]
    dpsi = -lu_solve(lu, rhs.T)
    return psi, dpsi


def _nfxp_market(log_shares_t, shares_t, x_t, nu_t, sigma, demo_t, pi,
                 want_grad, settings, warm_t, market=None):
    """Full share inversion and the implicit derivative of its solution."""
    try:
        delta, iters = solve_delta(shares_t, x_t, nu_t, sigma, demo_t, pi,
                                   settings=settings, delta0=warm_t,
                                   market=market)
    except (NumericalError, NonConvergenceError):
        if warm_t is None:
            raise
        # a stale warm start can strand the solver; retry cold before
        # giving up on this trial
        delta, iters = solve_delta(shares_t, x_t, nu_t, sigma, demo_t, pi,
                                   settings=settings, market=market)
    if not want_grad:
        return delta, None, iters
    probs = individual_choice_probs(delta, x_t, nu_t, sigma, demo_t, pi, market)
    jac = share_log_jacobian(delta, x_t, nu_t, sigma, demo_t, pi, market,
                             probs=probs)
    dlns = share_log_sigma_jacobian(delta, x_t, nu_t, sigma, demo_t, pi,
                                    market, probs=probs)
    ddelta = -np.linalg.solve(jac, dlns)
    return delta, ddelta, iters


def closed_form_delta_all(lam, sigma_part, dataset, want_grad=False, threads=1):
    """Closed-form mean utilities (and gradients) for every market."""
    sigma, pi = split_sigma_part(sigma_part, dataset.K, dataset.R)
    T, J = dataset.T, dataset.J
    n_params = dataset.K + dataset.K * dataset.R
    delta = np.empty((T, J))
    ddelta = np.empty((T, J, n_params)) if want_grad else None
    log_shares = dataset.log_shares

    def task(t):
        d, g = _closed_form_market(log_shares[t], lam[t], dataset.x[t],
                                   dataset.nu[t], sigma, dataset.demo_t(t), pi,
                                   want_grad, market=t)
        delta[t] = d
        if want_grad:
            ddelta[t] = g

    market_map(task, T, threads)
    return delta, ddelta


def ablp_map_all(delta0, sigma_part, dataset, want_grad=False, threads=1,
                 cond_limit=1e12):
    """One Newton step off the anchor (and gradients) for every market."""
    sigma, pi = split_sigma_part(sigma_part, dataset.K, dataset.R)
    T, J = dataset.T, dataset.J
    n_params = dataset.K + dataset.K * dataset.R
    psi = np.empty((T, J))
    dpsi = np.empty((T, J, n_params)) if want_grad else None
    log_shares = dataset.log_shares

    def task(t):
        p, g = _ablp_market(log_shares[t], delta0[t], dataset.x[t],
                            dataset.nu[t], sigma, dataset.demo_t(t), pi,
                            want_grad, cond_limit, market=t)
        psi[t] = p
        if want_grad:
            dpsi[t] = g

    market_map(task, T, threads)
    return psi, dpsi


def solve_delta_all(sigma_part, dataset, settings=None, method="newton",
                    want_grad=False, threads=1, warm=None):
    """Invert every market's share system (and differentiate the solution)."""
    sigma, pi = split_sigma_part(sigma_part, dataset.K, dataset.R)
    if settings is None:
        settings = InversionSettings()
    T, J = dataset.T, dataset.J
    n_params = dataset.K + dataset.K * dataset.R
    delta = np.empty((T, J))
    ddelta = np.empty((T, J, n_params)) if want_grad else None
    iters = np.zeros(T, dtype=np.int64)
    log_shares = dataset.log_shares

    def task(t):
        warm_t = None if warm is None else warm[t]
        d, g, it = _nfxp_market(log_shares[t], dataset.shares[t], dataset.x[t],
                                dataset.nu[t], sigma, dataset.demo_t(t), pi,
                                want_grad, settings, warm_t, market=t)
        delta[t] = d
        iters[t] = it
        if want_grad:
            ddelta[t] = g

    market_map(task, T, threads)
    return delta, ddelta, int(iters.sum())


def outside_probs_all(delta, sigma_part, dataset, threads=1):
    """Every consumer's outside-option probability, a (T, N) matrix."""
    sigma, pi = split_sigma_part(sigma_part, dataset.K, dataset.R)
    lam = np.empty((dataset.T, dataset.N))

    def task(t):
        probs = individual_choice_probs(delta[t], dataset.x[t], dataset.nu[t],
                                        sigma, dataset.demo_t(t), pi, market=t)
        lam[t] = probs[:, 0]

    market_map(task, dataset.T, threads)
    return lam


def ablp_map(delta0, theta, dataset, threads=1, cond_limit=1e12):
    """The anchored one-step map as a (T, J) matrix of updated utilities.

    Shares the Newton-step implementation with the inversion module, so a
    single step here is bitwise identical to newton_kantorovich_step. An
    ill-conditioned Jacobian is a hard error: this map has no fallback.
    """
    delta0 = np.asarray(delta0, dtype=np.float64)
    sigma, pi = theta.sigma, theta.pi
    out = np.empty_like(delta0)
    log_shares = dataset.log_shares

    def task(t):
        out[t] = newton_update(delta0[t], log_shares[t], dataset.x[t],
                               dataset.nu[t], sigma, dataset.demo_t(t), pi,
                               cond_limit, market=t)

    market_map(task, dataset.T, threads)
    return out


def nk_step_all(delta, sigma_part, dataset, threads=1, cond_limit=1e12):
    """One Newton step toward the share system per market, with fallback.

    Unlike ablp_map, an ill-conditioned market degrades to a contraction
    step. Returns (updated delta, number of markets that fell back); flags
    are accumulated per market so the count is thread-count independent.
    """
    sigma, pi = split_sigma_part(sigma_part, dataset.K, dataset.R)
    delta = np.asarray(delta, dtype=np.float64)
    out = np.empty_like(delta)
    fallbacks = np.zeros(dataset.T, dtype=np.int64)

    def task(t):
        events = {}
        out[t] = newton_kantorovich_step(delta[t], dataset.shares[t],
                                         dataset.x[t], dataset.nu[t], sigma,
                                         dataset.demo_t(t), pi, cond_limit,
                                         market=t, events=events)
        fallbacks[t] = events.get("newton_fallbacks", 0)

    market_map(task, dataset.T, threads)
    return out, int(fallbacks.sum())


def criterion_Q(lam, theta, dataset, W, threads=1):
    """Pseudo-criterion at fixed outside probabilities and full parameters."""
    lam = _check_lambda(lam, dataset)
    delta, _ = closed_form_delta_all(lam, theta.sigma_part(), dataset,
                                     threads=threads)
    xi_flat = delta.reshape(-1) - dataset.x_flat @ theta.beta
    ctx = MomentContext(dataset, W)
    value, _ = ctx.value_and_grad_at_beta(xi_flat)
    return value


def criterion_Q_gradient(lam, theta, dataset, W, threads=1,
                         concentrate_beta=False, ctx=None):
    """Gradient of the pseudo-criterion at fixed outside probabilities.

    Full-length over (beta, dispersion) by default; with concentrate_beta the
    beta block is solved out and the dispersion gradient carries the matching
    instrument-space projection.
    """
    lam = _check_lambda(lam, dataset)
    if ctx is None:
        ctx = MomentContext(dataset, W)
    delta, ddelta = closed_form_delta_all(lam, theta.sigma_part(), dataset,
                                          want_grad=True, threads=threads)
    ddelta_flat = ddelta.reshape(dataset.n_obs, -1)
    if concentrate_beta:
        _, _, grad = ctx.value_beta_grad(delta.reshape(-1), ddelta_flat)
        return grad
    xi_flat = delta.reshape(-1) - dataset.x_flat @ theta.beta
    _, grad_sigma = ctx.value_and_grad_at_beta(xi_flat, ddelta_flat)
    _, grad_beta = ctx.value_and_grad_at_beta(xi_flat, -dataset.x_flat)
    return np.concatenate([grad_beta, grad_sigma])


def criterion_Q_ablp(delta0, theta, dataset, W, threads=1, cond_limit=1e12):
    """Pseudo-criterion anchored at fixed mean utilities, full parameters."""
    delta0 = np.asarray(delta0, dtype=np.float64)
    psi, _ = ablp_map_all(delta0, theta.sigma_part(), dataset, threads=threads,
                          cond_limit=cond_limit)
    xi_flat = psi.reshape(-1) - dataset.x_flat @ theta.beta
    ctx = MomentContext(dataset, W)
    value, _ = ctx.value_and_grad_at_beta(xi_flat)
    return value


def criterion_Q_ablp_gradient(delta0, theta, dataset, W, threads=1,
                              concentrate_beta=False, cond_limit=1e12,
                              ctx=None):
    """Gradient of the anchored pseudo-criterion; analytic throughout."""
    delta0 = np.asarray(delta0, dtype=np.float64)
    if ctx is None:
        ctx = MomentContext(dataset, W)
    psi, dpsi = ablp_map_all(delta0, theta.sigma_part(), dataset,
                             want_grad=True, threads=threads,
                             cond_limit=cond_limit)
    dpsi_flat = dpsi.reshape(dataset.n_obs, -1)
    if concentrate_beta:
        _, _, grad = ctx.value_beta_grad(psi.reshape(-1), dpsi_flat)
        return grad
    xi_flat = psi.reshape(-1) - dataset.x_flat @ theta.beta
    _, grad_sigma = ctx.value_and_grad_at_beta(xi_flat, dpsi_flat)
    _, grad_beta = ctx.value_and_grad_at_beta(xi_flat, -dataset.x_flat)
    return np.concatenate([grad_beta, grad_sigma])


def criterion_G(theta, dataset, W, settings=None, method="newton", threads=1):
    """Exact criterion: residuals from a full share inversion at theta."""
    delta, _, _ = solve_delta_all(theta.sigma_part(), dataset,
                                  settings=settings, method=method,
                                  threads=threads)
    xi_flat = delta.reshape(-1) - dataset.x_flat @ theta.beta
    ctx = MomentContext(dataset, W)
    value, _ = ctx.value_and_grad_at_beta(xi_flat)
    return value


@dataclass
class EvalCounts:
    """Evaluation bookkeeping for one inner minimization.

    solver_iterations accumulates share-inversion sweeps when the criterion
    performs full inversions; it stays zero for the anchored criteria.
    """

    pairs: int = 0
    value_only: int = 0
    eval_time: float = 0.0
    solver_iterations: int = 0


@dataclass
class InnerResult:
    """Outcome of one concentrated minimization over the dispersion block."""

    sigma_part: np.ndarray
    beta: np.ndarray
    value: float
    grad_norm: float
    n_iterations: int
    counts: EvalCounts = field(default_factory=EvalCounts)
    converged: bool = True
    message: str = ""
    used_finite_differences: bool = False


def _concentrated_objective(kind, anchor, dataset, ctx, threads, cond_limit,
                            inversion_settings, warm, counts=None):
    """Build sigma_part -> (value, beta, grad) for the requested criterion."""

    def fun(sigma_part, want_grad=True):
        if kind == "lambda":
            delta, ddelta = closed_form_delta_all(anchor, sigma_part, dataset,
                                                  want_grad, threads)
        elif kind == "ablp":
            delta, ddelta = ablp_map_all(anchor, sigma_part, dataset,
                                         want_grad, threads, cond_limit)
        elif kind == "nfxp":
            delta, ddelta, iters = solve_delta_all(sigma_part, dataset,
                                                   inversion_settings,
                                                   want_grad=want_grad,
                                                   threads=threads,
                                                   warm=warm)
            if counts is not None:
                counts.solver_iterations += iters
            if warm is not None:
                warm[...] = delta
        else:
            raise InputError(f"unknown criterion kind {kind!r}")
        ddelta_flat = None if ddelta is None else ddelta.reshape(dataset.n_obs, -1)
        return ctx.value_beta_grad(delta.reshape(-1), ddelta_flat)

    return fun


def minimize_pseudo_gmm(kind, anchor, sigma_part0, dataset, W, config=None,
                        ctx=None, callback=None):
    """Quasi-Newton minimization of a concentrated criterion.

    kind selects the residual map: "lambda" (closed form at fixed outside
    probabilities), "ablp" (one step off a fixed anchor), or "nfxp" (full
    inversion at every trial). Terminates when the gradient infinity norm
    falls below config.inner_gtol or after config.inner_max_iter steps. An
    optional callback(iterate, last_evaluation) runs once per quasi-Newton
    step and may raise StopIteration to halt early.
    """
    if config is None:
        config = SolverConfig()
    if ctx is None:
        ctx = MomentContext(dataset, W)
    if kind == "lambda":
        anchor = _check_lambda(anchor, dataset)
    else:
        anchor = np.asarray(anchor, dtype=np.float64)

    counts = EvalCounts()
    warm = anchor.copy() if kind == "nfxp" else None
    objective = _concentrated_objective(kind, anchor, dataset, ctx,
                                        config.thread_count,
                                        config.inversion.cond_limit,
                                        config.inversion, warm, counts)
    last = {}

    def value_and_grad(sigma_part):
        tic = time.perf_counter()
        if config.finite_difference_gradients:
            value, beta, _ = objective(sigma_part, want_grad=False)
            counts.value_only += 1
            grad = np.empty_like(sigma_part)
            step = 1e-7
            for k in range(sigma_part.shape[0]):
                bump = np.zeros_like(sigma_part)
                bump[k] = step
                up, _, _ = objective(sigma_part + bump, want_grad=False)
                dn, _, _ = objective(sigma_part - bump, want_grad=False)
                grad[k] = (up - dn) / (2 * step)
                counts.value_only += 2
        else:
            value, beta, grad = objective(sigma_part, want_grad=True)
            counts.pairs += 1
        counts.eval_time += time.perf_counter() - tic
        last["sigma_part"] = np.array(sigma_part, copy=True)
        last["beta"] = beta
        last["grad"] = grad
        return value, grad

    step_hook = None
    if callback is not None:
        def step_hook(xk):
            callback(np.asarray(xk, dtype=np.float64), last)

    sigma_part0 = np.asarray(sigma_part0, dtype=np.float64)
    res = minimize(value_and_grad, sigma_part0, jac=True, method="BFGS",
                   callback=step_hook,
                   options={"gtol": config.inner_gtol,
                            "maxiter": config.inner_max_iter})
    if np.array_equal(last["sigma_part"], res.x):
        beta = last["beta"]
        grad_norm = float(np.abs(last["grad"]).max())
        value = float(res.fun)
    else:
        value, grad = value_and_grad(res.x)
        beta = last["beta"]
        grad_norm = float(np.abs(grad).max())
    converged = grad_norm < config.inner_gtol or res.status == 0
    return InnerResult(
        sigma_part=np.asarray(res.x, dtype=np.float64),
        beta=beta,
        value=float(value),
        grad_norm=grad_norm,
        n_iterations=int(res.nit),
        counts=counts,
        converged=converged,
        message=str(res.message),
        used_finite_differences=bool(config.finite_difference_gradients),
    )
