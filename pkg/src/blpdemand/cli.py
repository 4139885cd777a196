"""Command line front end: generate, estimate, montecarlo, thread-sweep,
scaling.

Option precedence is command line over environment (BLPDEMAND_<NAME>) over
config file (key=value) over built-in default. Exit codes: 0 success, 2 bad
input or schema violation, 3 nothing converged, 4 numerical failure.
"""

import os
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from .dataio import load_config, load_dataset, save_dataset
from .dgp import DgpConfig, generate_dataset
from .estimators import (fit_ablp, fit_npgmm, logit_start, multi_start_select,
                         random_starts, run_multistart)
from .exceptions import InputError, NonConvergenceError, NumericalError
from .gmm import (build_weight_matrix, criterion_Q, criterion_Q_ablp,
                  criterion_Q_ablp_gradient, criterion_Q_gradient,
                  outside_probs_all)
from .inference import npgmm_variance
from .reports import (DEFAULT_EVAL_COUNT, RunReport, environment_metadata,
                      fit_loglog_slope, montecarlo_summary,
                      render_montecarlo, render_run_report, render_scaling,
                      render_thread_sweep, replication_row, save_report,
                      theta_labels)
from .types import SolverConfig

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_NONCONVERGENCE = 3
EXIT_NUMERICAL = 4

ENV_PREFIX = "BLPDEMAND_"
METHODS = ("npgmm", "ablp", "nfxp")

# every key a config file may set; anything else is a typo worth rejecting
_FLAG_KEYS = {"method", "data", "draws", "seed", "starts", "threads",
              "tol_outer", "max_outer", "out_dir"}
_EXTRA_KEYS = {"n_products", "n_markets", "n_draws", "xi_scale",
               "replications", "n_evals", "j_list"}


def _default_threads():
    return min(os.cpu_count() or 1, 8)


def _cast(value, name, kind):
    if kind is str or value is None:
        return value
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise InputError(
            f"option '{name}': cannot parse {value!r} as {kind.__name__}"
        ) from None


class Options:
    """Resolved options for one invocation."""

    def __init__(self, ns):
        self.ns = ns
        config_path = self._raw("config", None)
        self.file_cfg = load_config(config_path) if config_path else {}
        unknown = set(self.file_cfg) - _FLAG_KEYS - _EXTRA_KEYS
        if unknown:
            raise InputError(
                f"config file sets unknown keys: {', '.join(sorted(unknown))}"
            )

    def _raw(self, name, default):
        cli = getattr(self.ns, name, None)
        if cli is not None:
            return cli
        env = os.environ.get(ENV_PREFIX + name.upper())
        if env is not None:
            return env
        if name in getattr(self, "file_cfg", {}):
            return self.file_cfg[name]
        return default

    def get(self, name, kind=str, default=None):
        return _cast(self._raw(name, default), name, kind)

    def out_dir(self):
        path = Path(self.get("out_dir", str, "."))
        path.mkdir(parents=True, exist_ok=True)
        return path

    def solver_config(self):
        return SolverConfig(
            tol_outer=self.get("tol_outer", float, 1e-6),
            max_outer=self.get("max_outer", int, 100),
            n_starts=self.get("starts", int, 5),
            thread_count=self.get("threads", int, _default_threads()),
        )

    def dgp_config(self, seed):
        return DgpConfig(
            n_products=self.get("n_products", int, 25),
            n_markets=self.get("n_markets", int, 50),
            n_draws=self.get("n_draws", int, 300),
            xi_scale=self.get("xi_scale", float, 1.0),
            seed=seed,
        )

    def dataset(self, threads, require_files=False):
        """From files when both paths are set, otherwise freshly generated."""
        data = self.get("data")
        draws = self.get("draws")
        if (data is None) != (draws is None):
            raise InputError("--data and --draws must be given together")
        if data is not None:
            return load_dataset(data, draws)
        if require_files:
            raise InputError("this command needs --data and --draws")
        seed = self.get("seed", int, 0)
        return generate_dataset(self.dgp_config(seed), threads=threads)[0]


def cmd_generate(ns):
    opts = Options(ns)
    seed = opts.get("seed", int, 0)
    threads = opts.get("threads", int, _default_threads())
    config = opts.dgp_config(seed)
    dataset, theta, _ = generate_dataset(config, threads=threads)
    out = opts.out_dir()
    save_dataset(dataset, out / "products.csv", out / "draws.csv")
    labels = theta_labels(dataset.K, dataset.R)
    save_report({"seed": seed,
                 "n_products": dataset.J, "n_markets": dataset.T,
                 "n_draws": dataset.N,
                 "theta": dict(zip(labels, theta.as_vector().tolist()))},
                out / "truth.json")
    print(f"wrote {dataset.T} markets x {dataset.J} products "
          f"({dataset.N} draws) to {out}")
    return EXIT_OK


def cmd_estimate(ns):
    opts = Options(ns)
    method = opts.get("method", str, "npgmm")
    if method not in METHODS + ("all",):
        raise InputError(
            f"--method must be one of {', '.join(METHODS + ('all',))}, "
            f"got {method!r}"
        )
    solver = opts.solver_config()
    seed = opts.get("seed", int, 0)
    dataset = opts.dataset(solver.thread_count, require_files=True)
    W = build_weight_matrix(dataset)
    out = opts.out_dir()
    env = environment_metadata(solver.thread_count)
    echo = {"method": method, "seed": seed, "starts": solver.n_starts,
            "tol_outer": solver.tol_outer, "max_outer": solver.max_outer}

    all_converged = True
    for m in (METHODS if method == "all" else (method,)):
        best, results = run_multistart(dataset, m, W=W, config=solver,
                                       seed=seed)
        variance = None
        if m == "npgmm" and best.converged:
            try:
                variance = npgmm_variance(best, dataset, W,
                                          threads=solver.thread_count)
            except NumericalError as exc:
                print(f"note: variance for {m} not computed: {exc}",
                      file=sys.stderr)
        report = RunReport(
            method=m, starts=results,
            selected_index=next(i for i, r in enumerate(results)
                                if r is best),
            variance=variance, environment=env, config_echo=echo)
        save_report(report, out / f"{m}_report.json")
        text = render_run_report(report)
        (out / f"{m}_report.txt").write_text(text, encoding="utf-8")
        print(text, end="")
        all_converged = all_converged and best.converged
    return EXIT_OK if all_converged else EXIT_NONCONVERGENCE


def cmd_montecarlo(ns):
    opts = Options(ns)
    solver = opts.solver_config()
    seed = opts.get("seed", int, 0)
    n_reps = opts.get("replications", int, 5)
    if n_reps < 1:
        raise InputError("replications must be >= 1")
    out = opts.out_dir()
    fitters = {"npgmm": fit_npgmm, "ablp": fit_ablp}

    rows, failures = [], []
    truth = labels = None
    for rep in range(n_reps):
        config = opts.dgp_config(seed + rep)
        try:
            dataset, theta_true, _ = generate_dataset(
                config, threads=solver.thread_count)
            if labels is None:
                labels = theta_labels(dataset.K, dataset.R)
                truth = theta_true.as_vector()
            W = build_weight_matrix(dataset)
            starts = random_starts(dataset, W, solver.n_starts, seed + rep,
                                   solver)
            for name, fitter in fitters.items():
                fits = [fitter(dataset, W, solver, s, i)
                        for i, s in enumerate(starts)]
                best = multi_start_select(fits)
                rows.extend(replication_row(rep, f, f is best, labels)
                            for f in fits)
        except (InputError, NumericalError, NonConvergenceError) as exc:
            failures.append({"replication": rep, "error": str(exc)})
            print(f"replication {rep} failed: {exc}", file=sys.stderr)
    if labels is None:
        raise NumericalError("every replication failed before estimation")

    pd.DataFrame(rows).to_csv(out / "replications.csv", index=False,
                              float_format="%.17g")
    summary = montecarlo_summary(rows, truth, labels)
    summary["failures"] = failures
    summary["environment"] = environment_metadata(solver.thread_count)
    save_report(summary, out / "summary.json")
    text = render_montecarlo(summary)
    (out / "summary.txt").write_text(text, encoding="utf-8")
    print(text, end="")

    any_converged = any(block["dataset_level_rate"] > 0
                        for block in summary["methods"].values())
    return EXIT_OK if any_converged else EXIT_NONCONVERGENCE


def _timed_loop(fn, n_evals):
    t0 = time.perf_counter()
    for _ in range(n_evals):
        result = fn()
    return time.perf_counter() - t0, result


def cmd_thread_sweep(ns):
    opts = Options(ns)
    raw = opts.get("threads", str, "1,2,4")
    thread_list = [_cast(part.strip(), "threads", int)
                   for part in str(raw).split(",")]
    if not thread_list or min(thread_list) < 1:
        raise InputError("thread counts must be positive integers")
    n_evals = opts.get("n_evals", int, DEFAULT_EVAL_COUNT)
    dataset = opts.dataset(thread_list[0])
    W = build_weight_matrix(dataset)
    delta0, theta0 = logit_start(dataset, W)
    lam0 = outside_probs_all(delta0, theta0.sigma_part(), dataset)
    out = opts.out_dir()

    anchors = {
        "npgmm": (lambda n: criterion_Q(lam0, theta0, dataset, W, threads=n),
                  lambda n: criterion_Q_gradient(lam0, theta0, dataset, W,
                                                 threads=n)),
        "ablp": (lambda n: criterion_Q_ablp(delta0, theta0, dataset, W,
                                            threads=n),
                 lambda n: criterion_Q_ablp_gradient(delta0, theta0, dataset,
                                                     W, threads=n)),
    }
    rows_by_method, best_threads = {}, {}
    for method, (value_fn, grad_fn) in anchors.items():
        rows = []
        first_value = first_grad = None
        for n in thread_list:
            crit_seconds, value = _timed_loop(lambda: value_fn(n), n_evals)
            grad_seconds, grad = _timed_loop(lambda: grad_fn(n), n_evals)
            if first_value is None:
                first_value, first_grad = value, grad
            elif value != first_value or not np.array_equal(grad, first_grad):
                raise NumericalError(
                    f"{method}: results at {n} threads differ from "
                    f"{thread_list[0]} threads; the reduction order leaked"
                )
            rows.append({"threads": n, "n_evals": n_evals,
                         "criterion_seconds": crit_seconds,
                         "gradient_seconds": grad_seconds,
                         "total_seconds": crit_seconds + grad_seconds,
                         "criterion_value": value})
        rows_by_method[method] = rows
        best_threads[method] = min(rows,
                                   key=lambda r: r["total_seconds"])["threads"]
    payload = {"n_evals": n_evals, "thread_list": thread_list,
               "methods": rows_by_method, "best_threads": best_threads,
               "environment": environment_metadata(max(thread_list))}
    save_report(payload, out / "thread_sweep.json")
    text = render_thread_sweep(rows_by_method, best_threads)
    (out / "thread_sweep.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_scaling(ns):
    opts = Options(ns)
    raw = opts.get("j_list", str, "25,50,100,200")
    j_list = [_cast(part.strip(), "j_list", int) for part in str(raw).split(",")]
    if len(j_list) < 3:
        raise InputError(
            f"need at least 3 sizes to fit a scaling slope, got {len(j_list)}"
        )
    solver = opts.solver_config()
    seed = opts.get("seed", int, 0)
    out = opts.out_dir()
    fitters = {"npgmm": fit_npgmm, "ablp": fit_ablp}

    panels = []
    for J in j_list:
        config = DgpConfig(
            n_products=J,
            n_markets=opts.get("n_markets", int, 20),
            n_draws=opts.get("n_draws", int, 100),
            xi_scale=opts.get("xi_scale", float, 1.0),
            seed=seed,
        )
        dataset, _, _ = generate_dataset(config, threads=solver.thread_count)
        W = build_weight_matrix(dataset)
        for method, fitter in fitters.items():
            fit = fitter(dataset, W, solver)
            panels.append({
                "method": method, "J": J,
                "time_per_inner_iter": fit.timings.time_per_inner_iter,
                "n_inner": fit.timings.n_inner,
                "wall_clock_total": fit.timings.wall_clock_total,
                "converged": bool(fit.converged),
            })
    slopes = {}
    for method in fitters:
        mine = [p for p in panels if p["method"] == method]
        slopes[method] = fit_loglog_slope(
            [p["J"] for p in mine], [p["time_per_inner_iter"] for p in mine])
    payload = {"panels": panels,
               "slopes": {m: {"slope": s.slope, "intercept": s.intercept,
                              "residuals": s.residuals.tolist()}
                          for m, s in slopes.items()},
               "environment": environment_metadata(solver.thread_count)}
    save_report(payload, out / "scaling.json")
    text = render_scaling(panels, slopes)
    (out / "scaling.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


_COMMANDS = {
    "generate": cmd_generate,
    "estimate": cmd_estimate,
    "montecarlo": cmd_montecarlo,
    "thread-sweep": cmd_thread_sweep,
    "scaling": cmd_scaling,
}


def build_parser():
    import argparse

    parser = argparse.ArgumentParser(
        prog="blpdemand",
        description="Demand estimation from aggregate market shares",
    )
    sub = parser.add_subparsers(dest="command")
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--method", help="npgmm, ablp, nfxp, or all")
        p.add_argument("--data", help="products.csv path")
        p.add_argument("--draws", help="draws.csv path")
        p.add_argument("--config", help="key=value settings file")
        p.add_argument("--seed")
        p.add_argument("--starts")
        p.add_argument("--threads",
                       help="thread count (comma list for thread-sweep)")
        p.add_argument("--tol-outer", dest="tol_outer")
        p.add_argument("--max-outer", dest="max_outer")
        p.add_argument("--out-dir", dest="out_dir")
        p.set_defaults(func=fn)
    return parser


def main(argv=None):
    parser = build_parser()
    ns = parser.parse_args(argv)
    if not hasattr(ns, "func"):
        parser.print_help(sys.stderr)
        return EXIT_SCHEMA
    try:
        return ns.func(ns)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except NonConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
