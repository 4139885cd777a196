"""Estimation drivers: three algorithms over the shared criterion machinery.

All three concentrate the linear parameters and minimize over the dispersion
block with analytic gradients. They differ in where the share inversion
lives:

* fit_npgmm alternates a closed-form pseudo-criterion minimization at fixed
  outside probabilities with one Newton step on the share system;
* fit_ablp alternates an anchored one-step criterion with an update of the
  anchor by the same one-step map;
* fit_nfxp minimizes the exact criterion, inverting the share system at
  every parameter trial.

The convergence rule is shared: successive outer iterates must move less
than tol_outer in both the mean utilities and the full parameter vector,
strictly, in the infinity norm.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .exceptions import InputError, NonConvergenceError, NumericalError
from .gmm import (
    MomentContext,
    ablp_map_all,
    build_weight_matrix,
    criterion_Q,
    criterion_Q_ablp,
    criterion_Q_gradient,
    linear_iv_gmm_beta,
    minimize_pseudo_gmm,
    nk_step_all,
    outside_probs_all,
    solve_delta_all,
)
from .parallel import market_map
from .shares import predict_shares
from .types import (
    EstimationState,
    FitResult,
    InversionSettings,
    ModelParameters,
    SolverConfig,
    TimingPanels,
    split_sigma_part,
)

# a start whose criterion grows this much over its first inner value is
# abandoned rather than run to the iteration cap
DIVERGENCE_FACTOR = 10.0
# consecutive violations of the factor before a start is declared divergent;
# single-iteration spikes of 10-60x occur on runs that still converge
DIVERGENCE_PATIENCE = 3


@dataclass
class StartPoint:
    """One starting point: mean utilities, parameters, and its substream."""

    delta0: np.ndarray
    theta0: ModelParameters
    substream: int = 0


def logit_start(dataset, W=None):
    """Zero-dispersion start: exact logit utilities and the linear IV fit."""
    if W is None:
        W = build_weight_matrix(dataset)
    delta0 = dataset.logit_delta()
    beta = linear_iv_gmm_beta(delta0, dataset, W)
    sigma = np.zeros(dataset.K)
    pi = np.zeros((dataset.K, dataset.R)) if dataset.R else None
    return delta0, ModelParameters(beta=beta, sigma=sigma, pi=pi)


def random_starts(dataset, W, n_starts, seed, config=None):
    """Dispersion starts scaled by the logit fit: sigma0_k = |beta_k|/2 * U_k.

    Each start gets its own substream of the seed; mean utilities are solved
    at the drawn dispersion. A start whose inversion fails is regenerated
    from the next substream, keeping the survivors' substream indices in the
    returned StartPoint records.
    """
    if n_starts < 1:
        raise InputError("n_starts must be positive")
    if config is None:
        config = SolverConfig()
    _, theta_logit = logit_start(dataset, W)
    scale = 0.5 * np.abs(theta_logit.beta)
    pi_zero = np.zeros((dataset.K, dataset.R)) if dataset.R else None
    starts = []
    substream = 0
    attempts_left = 10 * n_starts
    while len(starts) < n_starts:
        if attempts_left == 0:
            raise NumericalError(
                f"could not build {n_starts} starting points: the share "
                "inversion kept failing at the drawn dispersions"
            )
        attempts_left -= 1
        rng = np.random.default_rng(np.random.SeedSequence((seed, substream)))
        sigma0 = scale * rng.uniform(0.0, 1.0, dataset.K)
        sigma_part0 = np.concatenate([sigma0, np.zeros(dataset.K * dataset.R)])
        try:
            delta0, _, _ = solve_delta_all(sigma_part0, dataset,
                                           settings=config.inversion,
                                           threads=config.thread_count)
        except (NumericalError, NonConvergenceError):
            substream += 1
            continue
        theta0 = ModelParameters(beta=linear_iv_gmm_beta(delta0, dataset, W),
                                 sigma=sigma0,
                                 pi=None if pi_zero is None else pi_zero.copy())
        starts.append(StartPoint(delta0=delta0, theta0=theta0,
                                 substream=substream))
        substream += 1
    return starts


def check_convergence(prev, curr, tol):
    """Both infinity norms strictly below tol: mean utilities and parameters."""
    delta_move = np.abs(curr.delta - prev.delta).max()
    theta_move = np.abs(curr.theta.as_vector() - prev.theta.as_vector()).max()
    return bool(delta_move < tol and theta_move < tol)


def system_residual(delta, sigma_part, dataset, threads=1):
    """Worst log-share residual of the exact demand system at (delta, sigma)."""
    sigma, pi = split_sigma_part(sigma_part, dataset.K, dataset.R)
    worst = np.empty(dataset.T)

    def task(t):
        pred = predict_shares(delta[t], dataset.x[t], dataset.nu[t], sigma,
                              dataset.demo_t(t), pi, market=t)
        worst[t] = np.abs(dataset.log_shares[t] - np.log(pred)).max()

    market_map(task, dataset.T, threads)
    return float(worst.max())


def _failed_fit(method, dataset, start, start_index, panels, message):
    return FitResult(
        method=method,
        theta_hat=start.theta0,
        delta_hat=start.delta0,
        lambda_hat=None,
        criterion_value=float("inf"),
        converged=False,
        timings=panels,
        start_index=start_index,
        message=message,
    )


def _tight_settings(config):
    base = config.inversion
    return InversionSettings(
        tol_delta=min(base.tol_delta, 1e-12),
        max_iter_contraction=base.max_iter_contraction,
        max_iter_newton=base.max_iter_newton,
        cond_limit=base.cond_limit,
    )


def fit_npgmm(dataset, W, config=None, start=None, start_index=0):
    """Nested pseudo-GMM: update outside probabilities, minimize the
    closed-form pseudo-criterion, take one Newton step on the shares.

    At convergence the reported utilities come from a tight full inversion at
    the final dispersion, and the reported outside probabilities are computed
    from those utilities, so the fixed-point conditions hold by construction;
    the criterion gradient and system residual are recorded in diagnostics.
    """
    if config is None:
        config = SolverConfig()
    if start is None:
        delta0, theta0 = logit_start(dataset, W)
        start = StartPoint(delta0=delta0, theta0=theta0)
    t0 = time.perf_counter()
    panels = TimingPanels()
    ctx = MomentContext(dataset, W)
    threads = config.thread_count
    delta = np.array(start.delta0, dtype=np.float64)
    theta = start.theta0
    best_value = None
    strikes = 0
    converged = False
    message = ""
    fallback_total = 0

    try:
        for outer in range(1, config.max_outer + 1):
            panels.n_outer = outer
            lam = outside_probs_all(delta, theta.sigma_part(), dataset, threads)
            tic = time.perf_counter()
            inner = minimize_pseudo_gmm("lambda", lam, theta.sigma_part(),
                                        dataset, W, config, ctx)
            panels.wall_clock_inner += time.perf_counter() - tic
            panels.n_inner += inner.n_iterations
            panels.n_criterion_evals += inner.counts.pairs
            panels.n_criterion_only_evals += inner.counts.value_only
            panels.wall_clock_evals += inner.counts.eval_time
            theta_new = ModelParameters.from_vector(
                np.concatenate([inner.beta, inner.sigma_part]),
                dataset.K, dataset.R)
            # divergence guard off the running minimum; the first probability
            # re-anchoring is exempt and only a sustained rise aborts, since
            # transient spikes well past the factor still converge
            if best_value is None:
                best_value = inner.value
            else:
                if outer > 2 and inner.value > DIVERGENCE_FACTOR * best_value:
                    strikes += 1
                    if strikes >= DIVERGENCE_PATIENCE:
                        message = (f"aborted: criterion stayed above "
                                   f"{DIVERGENCE_FACTOR:.0f}x its best "
                                   f"{best_value:.3e} for {strikes} "
                                   f"iterations, latest {inner.value:.3e}")
                        break
                else:
                    strikes = 0
                best_value = min(best_value, inner.value)
            delta_new, fell_back = nk_step_all(delta, theta_new.sigma_part(),
                                               dataset, threads,
                                               config.inversion.cond_limit)
            fallback_total += fell_back
            prev = EstimationState(delta=delta, lam=lam, theta=theta,
                                   outer_iter=outer - 1)
            curr = EstimationState(delta=delta_new, lam=lam, theta=theta_new,
                                   outer_iter=outer)
            delta, theta = delta_new, theta_new
            if check_convergence(prev, curr, config.tol_outer):
                converged = True
                break
        else:
            message = f"no convergence in {config.max_outer} outer iterations"
    except (NumericalError, NonConvergenceError) as err:
        panels.wall_clock_total = time.perf_counter() - t0
        return _failed_fit("npgmm", dataset, start, start_index, panels,
                           str(err))

    diagnostics = {"newton_fallbacks": fallback_total}
    if converged:
        # certify the fixed point: tight inversion at the final dispersion,
        # outside probabilities from the certified utilities
        try:
            delta, _, _ = solve_delta_all(theta.sigma_part(), dataset,
                                          settings=_tight_settings(config),
                                          threads=threads, warm=delta)
        except (NumericalError, NonConvergenceError) as err:
            converged = False
            message = f"certification solve failed: {err}"
    lam = outside_probs_all(delta, theta.sigma_part(), dataset, threads)
    value = criterion_Q(lam, theta, dataset, W, threads=threads)
    if converged:
        grad = criterion_Q_gradient(lam, theta, dataset, W, threads=threads,
                                    ctx=ctx)
        diagnostics["criterion_gradient_norm"] = float(np.abs(grad).max())
        diagnostics["system_residual"] = system_residual(
            delta, theta.sigma_part(), dataset, threads)
    panels.wall_clock_total = time.perf_counter() - t0
    return FitResult(
        method="npgmm",
        theta_hat=theta,
        delta_hat=delta,
        lambda_hat=lam,
        criterion_value=value,
        converged=converged,
        timings=panels,
        start_index=start_index,
        message=message,
        diagnostics=diagnostics,
    )


def fit_ablp(dataset, W, config=None, start=None, start_index=0):
    """Anchored one-step estimation: minimize the anchored pseudo-criterion,
    then move the anchor by the one-step map at the new dispersion.

    An ill-conditioned share Jacobian anywhere is a hard failure of the
    start: the one-step map has no fallback.
    """
    if config is None:
        config = SolverConfig()
    if start is None:
        delta0, theta0 = logit_start(dataset, W)
        start = StartPoint(delta0=delta0, theta0=theta0)
    t0 = time.perf_counter()
    panels = TimingPanels()
    ctx = MomentContext(dataset, W)
    threads = config.thread_count
    delta = np.array(start.delta0, dtype=np.float64)
    theta = start.theta0
    best_value = None
    strikes = 0
    converged = False
    message = ""

    try:
        for outer in range(1, config.max_outer + 1):
            panels.n_outer = outer
            tic = time.perf_counter()
            inner = minimize_pseudo_gmm("ablp", delta, theta.sigma_part(),
                                        dataset, W, config, ctx)
            panels.wall_clock_inner += time.perf_counter() - tic
            panels.n_inner += inner.n_iterations
            panels.n_criterion_evals += inner.counts.pairs
            panels.n_criterion_only_evals += inner.counts.value_only
            panels.wall_clock_evals += inner.counts.eval_time
            theta_new = ModelParameters.from_vector(
                np.concatenate([inner.beta, inner.sigma_part]),
                dataset.K, dataset.R)
            # same guard as the probability-anchored loop
            if best_value is None:
                best_value = inner.value
            else:
                if outer > 2 and inner.value > DIVERGENCE_FACTOR * best_value:
                    strikes += 1
                    if strikes >= DIVERGENCE_PATIENCE:
                        message = (f"aborted: criterion stayed above "
                                   f"{DIVERGENCE_FACTOR:.0f}x its best "
                                   f"{best_value:.3e} for {strikes} "
                                   f"iterations, latest {inner.value:.3e}")
                        break
                else:
                    strikes = 0
                best_value = min(best_value, inner.value)
            delta_new, _ = ablp_map_all(delta, theta_new.sigma_part(),
                                        dataset, threads=threads,
                                        cond_limit=config.inversion.cond_limit)
            prev = EstimationState(delta=delta, lam=None, theta=theta,
                                   outer_iter=outer - 1)
            curr = EstimationState(delta=delta_new, lam=None, theta=theta_new,
                                   outer_iter=outer)
            delta, theta = delta_new, theta_new
            if check_convergence(prev, curr, config.tol_outer):
                converged = True
                break
        else:
            message = f"no convergence in {config.max_outer} outer iterations"
    except (NumericalError, NonConvergenceError) as err:
        panels.wall_clock_total = time.perf_counter() - t0
        return _failed_fit("ablp", dataset, start, start_index, panels,
                           str(err))

    value = criterion_Q_ablp(delta, theta, dataset, W, threads=threads)
    lam = outside_probs_all(delta, theta.sigma_part(), dataset, threads)
    diagnostics = {}
    if converged:
        diagnostics["system_residual"] = system_residual(
            delta, theta.sigma_part(), dataset, threads)
    panels.wall_clock_total = time.perf_counter() - t0
    return FitResult(
        method="ablp",
        theta_hat=theta,
        delta_hat=delta,
        lambda_hat=lam,
        criterion_value=value,
        converged=converged,
        timings=panels,
        start_index=start_index,
        message=message,
        diagnostics=diagnostics,
    )


def fit_nfxp(dataset, W, config=None, start=None, start_index=0):
    """Reference fixed-point estimator: quasi-Newton on the exact criterion.

    Every trial inverts the share system in every market, warm-started from
    the previous trial's solution. The outer parameter-movement rule is
    enforced through a step callback: once consecutive quasi-Newton iterates
    move less than tol_outer in every parameter, the run stops and counts as
    converged.
    """
    if config is None:
        config = SolverConfig()
    if start is None:
        delta0, theta0 = logit_start(dataset, W)
        start = StartPoint(delta0=delta0, theta0=theta0)
    t0 = time.perf_counter()
    panels = TimingPanels()
    ctx = MomentContext(dataset, W)
    threads = config.thread_count
    hook_state = {"prev": None, "stopped": False}

    def theta_rule(xk, last_eval):
        # include the concentrated beta when the last evaluation was at xk,
        # so the movement test covers the full parameter vector
        if np.array_equal(last_eval.get("sigma_part"), xk):
            vec = np.concatenate([last_eval["beta"], xk])
        else:
            vec = xk.copy()
        prev = hook_state["prev"]
        hook_state["prev"] = vec
        if (prev is not None and prev.shape == vec.shape
                and np.abs(vec - prev).max() < config.tol_outer):
            hook_state["stopped"] = True
            raise StopIteration

    try:
        inner = minimize_pseudo_gmm("nfxp", start.delta0,
                                    start.theta0.sigma_part(), dataset, W,
                                    config, ctx, callback=theta_rule)
        theta = ModelParameters.from_vector(
            np.concatenate([inner.beta, inner.sigma_part]),
            dataset.K, dataset.R)
        delta, _, _ = solve_delta_all(theta.sigma_part(), dataset,
                                      settings=_tight_settings(config),
                                      threads=threads)
    except (NumericalError, NonConvergenceError) as err:
        panels.wall_clock_total = time.perf_counter() - t0
        return _failed_fit("nfxp", dataset, start, start_index, panels,
                           str(err))

    lam = outside_probs_all(delta, theta.sigma_part(), dataset, threads)
    panels.n_outer = inner.n_iterations
    panels.n_inner = inner.counts.solver_iterations
    panels.n_criterion_evals = inner.counts.pairs
    panels.n_criterion_only_evals = inner.counts.value_only
    panels.wall_clock_inner = inner.counts.eval_time
    panels.wall_clock_evals = inner.counts.eval_time
    panels.wall_clock_total = time.perf_counter() - t0
    converged = inner.converged or hook_state["stopped"]
    return FitResult(
        method="nfxp",
        theta_hat=theta,
        delta_hat=delta,
        lambda_hat=lam,
        criterion_value=inner.value,
        converged=converged,
        timings=panels,
        start_index=start_index,
        message="" if converged else inner.message,
        diagnostics={"system_residual": system_residual(
            delta, theta.sigma_part(), dataset, threads)},
    )


_FITTERS = {"npgmm": fit_npgmm, "ablp": fit_ablp, "nfxp": fit_nfxp}


def multi_start_select(results):
    """Best result: minimum criterion among converged fits, ties by the
    lowest start index; with no converged fit, the best failure, flagged."""
    if not results:
        raise InputError("no fit results to select from")
    converged = [r for r in results if r.converged]
    pool = converged if converged else results
    best = min(pool, key=lambda r: (r.criterion_value, r.start_index))
    if not converged and not best.message:
        best = replace(best, message="no start converged")
    return best


def run_multistart(dataset, method, W=None, config=None, seed=0):
    """Estimate from several random starts; returns (best, all results).

    Starts run sequentially by default so per-start timings are comparable.
    With config.concurrent_starts they run in a thread pool (each fit then
    single-threaded internally) and timings are flagged non-comparable.
    """
    if method not in _FITTERS:
        raise InputError(f"unknown estimation method {method!r}")
    if config is None:
        config = SolverConfig()
    if W is None:
        W = build_weight_matrix(dataset)
    fit = _FITTERS[method]
    starts = random_starts(dataset, W, config.n_starts, seed, config)
    if config.concurrent_starts and config.n_starts > 1:
        inner_config = replace(config, thread_count=1)
        with ThreadPoolExecutor(max_workers=config.thread_count) as pool:
            futures = [
                pool.submit(fit, dataset, W, inner_config, s, i)
                for i, s in enumerate(starts)
            ]
            results = [f.result() for f in futures]
        for r in results:
            r.diagnostics["timings_comparable"] = False
    else:
        results = [fit(dataset, W, config, s, i)
                   for i, s in enumerate(starts)]
    return multi_start_select(results), results
