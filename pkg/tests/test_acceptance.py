"""Numbered acceptance checks, one test per headline guarantee.

Run with -v to get a pass/fail line per guarantee; each test also prints
the quantities it asserts on, so a red line carries the measured numbers.
Sizes are calibrated for a single desktop core: the quick checks (01-03,
10) finish in about a minute, the estimation sweeps (04-09) dominate and
bring the module to roughly half an hour.
"""

import time
import warnings

import numpy as np
import pytest

from conftest import synthetic_dataset

from blpdemand.dgp import DgpConfig, generate_dataset
from blpdemand.estimators import (
    StartPoint,
    fit_ablp,
    fit_npgmm,
    logit_start,
    multi_start_select,
    random_starts,
    run_multistart,
)
from blpdemand.gmm import (
    build_weight_matrix,
    criterion_Q,
    criterion_Q_ablp,
    criterion_Q_ablp_gradient,
    criterion_Q_gradient,
    outside_probs_all,
)
from blpdemand.inference import npgmm_variance
from blpdemand.inversion import solve_delta
from blpdemand.reports import fit_loglog_slope, theta_labels
from blpdemand.shares import (
    closed_form_delta,
    delta_param_gradients,
    outside_probs,
    predict_shares,
)
from blpdemand.types import InversionSettings, ModelParameters, SolverConfig

pytestmark = pytest.mark.acceptance


def folded(theta):
    """Parameter vector with the dispersion block sign-folded.

    sigma enters the model only through sigma * nu with symmetric draws, so
    -sigma_k and sigma_k are the same model; comparisons fold to |sigma_k|.
    """
    vec = theta.as_vector().copy()
    K = theta.n_characteristics
    vec[K:2 * K] = np.abs(vec[K:2 * K])
    return vec


def central_fd(fun, vec, h_scale=1e-6):
    vec = np.asarray(vec, dtype=np.float64)
    grad = np.empty_like(vec)
    for k in range(vec.size):
        h = h_scale * max(1.0, abs(vec[k]))
        up = vec.copy()
        dn = vec.copy()
        up[k] += h
        dn[k] -= h
        grad[k] = (fun(up) - fun(dn)) / (2.0 * h)
    return grad


def rel_err(analytic, fd):
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    fd = np.asarray(fd, dtype=np.float64).ravel()
    scale = max(float(np.linalg.norm(fd)), 1e-12)
    return float(np.linalg.norm(analytic - fd)) / scale


def shared_start(dataset, W):
    delta0, theta0 = logit_start(dataset, W)
    return StartPoint(delta0=delta0, theta0=theta0)


def test_01_closed_form_inversion_identity():
    """Mapping shares and outside probabilities back through the closed
    form recovers the mean utilities to near machine precision."""
    rng = np.random.default_rng(101)
    worst = 0.0
    for case in range(100):
        J = int(rng.integers(2, 11))
        N = int(rng.integers(5, 51))
        K = int(rng.integers(1, 4))
        R = int(rng.integers(1, 3)) if case % 2 else 0
        x = rng.normal(size=(J, K))
        nu = rng.normal(size=(N, K))
        sigma = rng.uniform(-2.0, 2.0, size=K)
        demo = rng.normal(size=(N, R)) if R else None
        pi = rng.uniform(-1.0, 1.0, size=(K, R)) if R else None
        delta = rng.normal(size=J)
        shares = predict_shares(delta, x, nu, sigma, demo, pi)
        lam = outside_probs(delta, x, nu, sigma, demo, pi)
        back = closed_form_delta(shares, lam, x, nu, sigma, demo, pi)
        worst = max(worst, float(np.abs(back - delta).max()))
    print(f"[01] max |recovered - true| over 100 instances: {worst:.3e}")
    assert worst < 1e-12


def test_02_round_trip_inversion_both_methods():
    """Both inversion methods recover a known mean-utility vector from its
    own shares; the Newton path needs strictly fewer iterations than the
    contraction on at least 90% of markets."""
    # the solvers stop on the log-share residual; meeting 1e-10 in the
    # utilities needs an extra decade to cover the inverse-Jacobian factor
    settings = InversionSettings(tol_delta=1e-13)
    worst = {"newton": 0.0, "contraction": 0.0}
    newton_fewer = 0
    total = 0
    for instance in range(20):
        ds, theta, delta = synthetic_dataset(
            300 + instance, n_markets=10, n_products=25, n_draws=60)
        for t in range(ds.T):
            iters = {}
            for method in ("newton", "contraction"):
                got, n_iter = solve_delta(
                    ds.shares[t], ds.x[t], ds.nu[t], theta.sigma,
                    settings=settings, method=method, market=t)
                worst[method] = max(
                    worst[method], float(np.abs(got - delta[t]).max()))
                iters[method] = n_iter
            total += 1
            newton_fewer += iters["newton"] < iters["contraction"]
    fewer = newton_fewer / total
    print(f"[02] max recovery error newton {worst['newton']:.3e}, "
          f"contraction {worst['contraction']:.3e}; newton fewer "
          f"iterations on {fewer:.1%} of {total} markets")
    assert worst["newton"] < 1e-10
    assert worst["contraction"] < 1e-10
    assert fewer >= 0.90


def test_03_analytic_gradients_match_finite_differences():
    """The three analytic derivative routines agree with central finite
    differences to a relative error below 1e-5 on 20 random instances."""
    rng = np.random.default_rng(303)
    worst = {"criterion_Q_gradient": 0.0,
             "delta_param_gradients": 0.0,
             "criterion_Q_ablp_gradient": 0.0}
    for instance in range(20):
        R = 1 if instance % 2 else 0
        ds, theta, delta = synthetic_dataset(
            600 + instance, n_markets=3, n_products=8, n_chars=2,
            n_draws=25, n_demo=R)
        W = build_weight_matrix(ds)
        K = ds.K
        point = theta.as_vector() + rng.uniform(-0.2, 0.2, 2 * K + K * R)
        theta_eval = ModelParameters.from_vector(point, K, R)
        lam = outside_probs_all(delta, theta_eval.sigma_part(), ds)

        analytic = criterion_Q_gradient(lam, theta_eval, ds, W)
        fd = central_fd(
            lambda v: criterion_Q(
                lam, ModelParameters.from_vector(v, K, R), ds, W),
            point)
        worst["criterion_Q_gradient"] = max(
            worst["criterion_Q_gradient"], rel_err(analytic, fd))

        analytic = criterion_Q_ablp_gradient(delta, theta_eval, ds, W)
        fd = central_fd(
            lambda v: criterion_Q_ablp(
                delta, ModelParameters.from_vector(v, K, R), ds, W),
            point)
        worst["criterion_Q_ablp_gradient"] = max(
            worst["criterion_Q_ablp_gradient"], rel_err(analytic, fd))

        demo0 = None if ds.demo is None else ds.demo[0]
        analytic = delta_param_gradients(
            ds.shares[0], lam[0], ds.x[0], ds.nu[0], theta_eval.sigma,
            demo0, theta_eval.pi)
        sp = theta_eval.sigma_part()
        cols = []
        for k in range(sp.size):
            def delta_at(v, k=k):
                bumped = sp.copy()
                bumped[k] = v
                full = ModelParameters.from_vector(
                    np.concatenate([theta_eval.beta, bumped]), K, R)
                return closed_form_delta(
                    ds.shares[0], lam[0], ds.x[0], ds.nu[0], full.sigma,
                    demo0, full.pi)
            h = 1e-6 * max(1.0, abs(sp[k]))
            cols.append((delta_at(sp[k] + h) - delta_at(sp[k] - h)) / (2 * h))
        worst["delta_param_gradients"] = max(
            worst["delta_param_gradients"],
            rel_err(analytic, np.column_stack(cols)))
    for name, err in worst.items():
        print(f"[03] {name}: worst relative error {err:.3e}")
    assert all(err < 1e-5 for err in worst.values())


@pytest.mark.slow
def test_04_estimator_agreement_on_shared_starts():
    """From shared starting points on the same datasets, the two nested
    methods land within 0.1 of each other on every coordinate.

    The two methods zero different instrument combinations in finite
    samples (partial versus total derivatives of the mean utilities), so
    their fixed points coincide only asymptotically. The gap concentrates
    on the weakly identified dispersion of the constant.
    """
    config = SolverConfig(n_starts=2)
    labels = theta_labels(5)
    per_dataset = []
    for seed in range(5):
        cfg = DgpConfig(n_products=25, n_markets=50, n_draws=200, seed=seed)
        ds, _, _ = generate_dataset(cfg)
        W = build_weight_matrix(ds)
        starts = random_starts(ds, W, config.n_starts, seed, config)
        fits_np = [fit_npgmm(ds, W, config, s, i) for i, s in enumerate(starts)]
        fits_ab = [fit_ablp(ds, W, config, s, i) for i, s in enumerate(starts)]
        best_np = multi_start_select(fits_np)
        best_ab = multi_start_select(fits_ab)
        gap = np.abs(folded(best_np.theta_hat) - folded(best_ab.theta_hat))
        per_dataset.append(gap)
        k = int(np.argmax(gap))
        print(f"[04] dataset {seed}: max gap {gap.max():.4f} on {labels[k]} "
              f"(converged: npgmm={best_np.converged}, "
              f"ablp={best_ab.converged})")
    gaps = np.vstack(per_dataset)
    print(f"[04] per-coordinate max over datasets: "
          + ", ".join(f"{l}={g:.4f}" for l, g in zip(labels, gaps.max(axis=0))))
    assert float(gaps.max()) <= 0.1


@pytest.mark.slow
def test_05_parameter_recovery():
    """Across 10 simulated panels the mean price coefficient lands within
    0.15 of the truth and the mean absolute dispersion errors stay below
    0.15 for every characteristic except the constant, whose dispersion is
    weakly identified and excluded."""
    truth = DgpConfig()
    config = SolverConfig(n_starts=3)
    rows = []
    for rep in range(10):
        cfg = DgpConfig(n_products=25, n_markets=100, n_draws=500,
                        seed=1000 + rep)
        ds, _, _ = generate_dataset(cfg)
        best, _ = run_multistart(ds, "npgmm", config=config, seed=1000 + rep)
        rows.append(folded(best.theta_hat))
        print(f"[05] rep {rep}: converged={best.converged} "
              f"beta_p={rows[-1][4]:+.4f} sigma={np.round(rows[-1][5:], 4)}")
    est = np.vstack(rows)
    beta_p_mean = float(est[:, 4].mean())
    mae = np.abs(est[:, 5:] - truth.sigma).mean(axis=0)
    print(f"[05] mean beta_p {beta_p_mean:+.4f} (truth -3); dispersion MAE "
          + ", ".join(f"{v:.4f}" for v in mae) + " (constant excluded)")
    assert abs(beta_p_mean + 3.0) <= 0.15
    assert np.all(mae[1:] < 0.15)


@pytest.mark.slow
def test_06_wall_clock_ordering():
    """On shared datasets and starts the probability-anchored method is
    faster in total wall-clock than the utility-anchored one at every
    size, and at least 1.5x faster at J=100."""
    config = SolverConfig()
    ratios = {}
    for J in (25, 50, 100):
        cfg = DgpConfig(n_products=J, n_markets=50, n_draws=100, seed=7)
        ds, _, _ = generate_dataset(cfg)
        W = build_weight_matrix(ds)
        start = shared_start(ds, W)
        tic = time.perf_counter()
        fit_npgmm(ds, W, config, start)
        t_np = time.perf_counter() - tic
        tic = time.perf_counter()
        fit_ablp(ds, W, config, start)
        t_ab = time.perf_counter() - tic
        ratios[J] = (t_np, t_ab)
        print(f"[06] J={J}: npgmm {t_np:.2f}s, ablp {t_ab:.2f}s, "
              f"ratio {t_ab / t_np:.2f}x")
    assert all(t_np < t_ab for t_np, t_ab in ratios.values())
    t_np, t_ab = ratios[100]
    assert t_ab / t_np >= 1.5


@pytest.mark.slow
def test_07_scaling_slopes():
    """Log-log slope of time per inner iteration against the product count
    stays at or below 1.25 for the probability-anchored method and below
    the utility-anchored method's slope."""
    j_list = (25, 50, 100, 200)
    per_iter = {"npgmm": [], "ablp": []}
    for J in j_list:
        cfg = DgpConfig(n_products=J, n_markets=20, n_draws=100, seed=11)
        ds, _, _ = generate_dataset(cfg)
        W = build_weight_matrix(ds)
        start = shared_start(ds, W)
        for name, fitter in (("npgmm", fit_npgmm), ("ablp", fit_ablp)):
            fit = fitter(ds, W, SolverConfig(), start)
            per_iter[name].append(fit.timings.time_per_inner_iter)
    slope_np = fit_loglog_slope(j_list, per_iter["npgmm"]).slope
    slope_ab = fit_loglog_slope(j_list, per_iter["ablp"]).slope
    print(f"[07] slope npgmm {slope_np:.3f}, ablp {slope_ab:.3f}; "
          f"per-iteration seconds npgmm {np.round(per_iter['npgmm'], 5)}, "
          f"ablp {np.round(per_iter['ablp'], 5)}")
    assert slope_np <= 1.25
    assert slope_np < slope_ab


@pytest.mark.slow
def test_08_thread_determinism_and_speedup():
    """Estimates are bit-identical across thread counts. The criterion and
    gradient evaluation should also speed up with threads; that half is a
    warning rather than a failure because it depends on the hardware."""
    cfg = DgpConfig(n_products=25, n_markets=100, n_draws=100, seed=13)
    ds, _, _ = generate_dataset(cfg)
    W = build_weight_matrix(ds)
    start = shared_start(ds, W)
    stamps = {}
    for threads in (1, 2, 4):
        config = SolverConfig(thread_count=threads)
        stamps[threads] = tuple(
            fitter(ds, W, config, start).theta_hat.as_vector().tobytes()
            for fitter in (fit_npgmm, fit_ablp))
    identical = stamps[1] == stamps[2] == stamps[4]
    print(f"[08] estimates bit-identical across threads 1/2/4: {identical}")
    assert identical, "estimates changed with the thread count"

    theta = start.theta0
    lam = outside_probs_all(start.delta0, theta.sigma_part(), ds)
    def one_pass(threads, n_evals=40):
        tic = time.perf_counter()
        for _ in range(n_evals):
            criterion_Q(lam, theta, ds, W, threads=threads)
            criterion_Q_gradient(lam, theta, ds, W, threads=threads)
        return time.perf_counter() - tic
    t1 = one_pass(1)
    t4 = one_pass(4)
    speedup = t1 / t4
    print(f"[08] evaluation speedup at 4 threads: {speedup:.2f}x "
          f"({t1:.2f}s -> {t4:.2f}s)")
    if speedup < 1.25:
        warnings.warn(
            f"4-thread evaluation speedup {speedup:.2f}x is below the 1.25x "
            "target; expected on boxes without 4 free cores", UserWarning)


@pytest.mark.slow
def test_09_convergence_rates():
    """Over 10 datasets with 5 random starts each, every dataset yields at
    least one converged start (dataset level 100%) and at least 90% of all
    starts converge, for both nested methods."""
    config = SolverConfig(n_starts=5)
    flags = {"npgmm": [], "ablp": []}
    for seed in range(10):
        cfg = DgpConfig(n_products=25, n_markets=50, n_draws=100,
                        seed=500 + seed)
        ds, _, _ = generate_dataset(cfg)
        W = build_weight_matrix(ds)
        starts = random_starts(ds, W, config.n_starts, 500 + seed, config)
        for name, fitter in (("npgmm", fit_npgmm), ("ablp", fit_ablp)):
            flags[name].append([
                fitter(ds, W, config, s, i).converged
                for i, s in enumerate(starts)])
    ok = True
    for name, table in flags.items():
        table = np.array(table)
        dataset_rate = float(table.any(axis=1).mean())
        start_rate = float(table.mean())
        print(f"[09] {name}: dataset-level {dataset_rate:.0%}, "
              f"start-level {start_rate:.0%} "
              f"({int(table.sum())}/{table.size} starts)")
        ok = ok and dataset_rate == 1.0 and start_rate >= 0.90
    assert ok


@pytest.mark.slow
def test_10_variance_collapse_and_ordering():
    """With the outside-probability correction switched off the sandwich
    collapses exactly to the plain GMM variance, and at sample estimates
    the correction can only add variance up to numerical tolerance."""
    cfg = DgpConfig(n_products=25, n_markets=100, n_draws=300, seed=21)
    ds, _, _ = generate_dataset(cfg)
    W = build_weight_matrix(ds)
    fit = fit_npgmm(ds, W, SolverConfig(), shared_start(ds, W))
    assert fit.converged, "variance check needs a converged fit"
    for flag in ("zero_lambda_jacobian", "zero_cross_term"):
        collapsed = npgmm_variance(fit, ds, W, **{flag: True})
        exact = np.array_equal(collapsed.v_np, collapsed.v_gmm)
        print(f"[10] collapse with {flag}: exact={exact}")
        assert exact
    # the ordering claim is exact at sampled matrices when both middles are
    # the criterion curvature; the score-covariance middle only obeys it in
    # the limit, so the check runs with hessian_omega on
    report = npgmm_variance(fit, ds, W, hessian_omega=True)
    diff = report.v_np - report.v_gmm
    eigs = np.linalg.eigvalsh(0.5 * (diff + diff.T))
    print(f"[10] min eigenvalue of (V_np - V_gmm): {eigs.min():.3e}")
    assert float(eigs.min()) >= -1e-6
