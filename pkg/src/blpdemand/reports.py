"""Report assembly: run records, replication summaries, slope fits, text.

Every number in the rendered text is carried in the machine-readable
structure as well, so downstream checks can recompute instead of parsing
prose. Dispersion estimates enter cross-replication summaries in absolute
value: the model is invariant to the sign of each dispersion coordinate, so
raw signs are a label, not a finding.
"""

import json
import platform
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InputError

DEFAULT_EVAL_COUNT = 1000


def theta_labels(K, R=0):
    labels = [f"beta_{k + 1}" for k in range(K)]
    labels += [f"sigma_{k + 1}" for k in range(K)]
    for k in range(K):
        labels += [f"pi_{k + 1}_{r + 1}" for r in range(R)]
    return labels


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def environment_metadata(threads):
    return {
        "threads": int(threads),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "platform": platform.platform(),
    }


def fit_to_dict(fit):
    theta = fit.theta_hat
    labels = theta_labels(theta.n_characteristics, theta.n_demographics)
    return {
        "method": fit.method,
        "start_index": fit.start_index,
        "converged": bool(fit.converged),
        "message": fit.message,
        "criterion_value": float(fit.criterion_value),
        "theta": dict(zip(labels, theta.as_vector().tolist())),
        "timings": _json_safe(fit.timings.as_dict()),
    }


def variance_to_dict(variance, labels):
    return {
        "se_np": dict(zip(labels, variance.se_np.tolist())),
        "se_gmm": dict(zip(labels, variance.se_gmm.tolist())),
        "v_np": variance.v_np.tolist(),
        "v_gmm": variance.v_gmm.tolist(),
    }


@dataclass
class RunReport:
    """One estimator's multi-start run: all starts, the pick, the variance."""

    method: str
    starts: list
    selected_index: int
    variance: object = None
    environment: dict = field(default_factory=dict)
    config_echo: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.starts:
            raise InputError("a run report needs at least one start record")
        if not 0 <= self.selected_index < len(self.starts):
            raise InputError(
                f"selected_index {self.selected_index} outside the "
                f"{len(self.starts)} recorded starts"
            )

    @property
    def selected(self):
        return self.starts[self.selected_index]

    def to_dict(self):
        theta = self.selected.theta_hat
        labels = theta_labels(theta.n_characteristics, theta.n_demographics)
        return {
            "method": self.method,
            "selected_index": self.selected_index,
            "starts": [fit_to_dict(f) for f in self.starts],
            "selected": fit_to_dict(self.selected),
            "variance": (variance_to_dict(self.variance, labels)
                         if self.variance is not None else None),
            "environment": _json_safe(self.environment),
            "config": _json_safe(self.config_echo),
        }


def save_report(payload, path):
    """JSON dump of a report dict (or anything with to_dict)."""
    if hasattr(payload, "to_dict"):
        payload = payload.to_dict()
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_json_safe(payload), fh, indent=2)
        fh.write("\n")


def render_run_report(report):
    fit = report.selected
    theta = fit.theta_hat
    labels = theta_labels(theta.n_characteristics, theta.n_demographics)
    values = theta.as_vector()
    lines = [f"method: {report.method}",
             f"threads: {report.environment.get('threads', 1)}"]
    lines.append("")
    lines.append("start  converged  criterion      outer  inner  seconds")
    for f in report.starts:
        mark = " *" if f is fit else "  "
        lines.append(
            f"{f.start_index:>5}  {str(f.converged):<9}  "
            f"{f.criterion_value:<13.6e}  {f.timings.n_outer:>5}  "
            f"{f.timings.n_inner:>5}  {f.timings.wall_clock_total:>7.2f}{mark}"
        )
    lines.append("")
    se = report.variance.se_np if report.variance is not None else None
    header = "parameter     estimate"
    if se is not None:
        header += "      std error"
    lines.append(header)
    for i, label in enumerate(labels):
        row = f"{label:<12} {values[i]:>9.4f}"
        if se is not None:
            row += f"  {se[i]:>13.4f}"
        lines.append(row)
    if report.variance is None:
        lines.append("(standard errors reported for the probability-anchored "
                     "method only)")
    if not fit.converged:
        lines.append(f"WARNING: selected fit did not converge: {fit.message}")
    return "\n".join(lines) + "\n"


def replication_row(replication, fit, selected, labels):
    row = {
        "replication": replication,
        "method": fit.method,
        "start_index": fit.start_index,
        "selected": int(selected),
        "converged": int(fit.converged),
        "criterion_value": float(fit.criterion_value),
        "wall_clock_total": float(fit.timings.wall_clock_total),
    }
    row.update(zip(labels, fit.theta_hat.as_vector().tolist()))
    return row


def montecarlo_summary(rows, truth, labels):
    """Per-method convergence rates and moment statistics.

    Moment statistics (bias, std, rmse) cover replications whose selected
    fit converged; convergence rates cover everything. Dispersion
    coordinates are folded to absolute value first.
    """
    truth = np.asarray(truth, dtype=np.float64)
    fold = np.array([lab.startswith("sigma_") for lab in labels])
    folded_truth = np.where(fold, np.abs(truth), truth)
    out = {}
    for method in sorted({r["method"] for r in rows}):
        mine = [r for r in rows if r["method"] == method]
        reps = sorted({r["replication"] for r in mine})
        by_rep_converged = {
            rep: any(r["converged"] for r in mine if r["replication"] == rep)
            for rep in reps
        }
        picked = [r for r in mine if r["selected"] and r["converged"]]
        stats = None
        if picked:
            est = np.array([[r[lab] for lab in labels] for r in picked])
            est[:, fold] = np.abs(est[:, fold])
            dev = est - folded_truth
            stats = {
                "n_used": len(picked),
                "mean": est.mean(axis=0).tolist(),
                "bias": dev.mean(axis=0).tolist(),
                "std": est.std(axis=0, ddof=1).tolist() if len(picked) > 1
                        else [float("nan")] * est.shape[1],
                "rmse": np.sqrt((dev**2).mean(axis=0)).tolist(),
            }
        out[method] = {
            "n_replications": len(reps),
            "dataset_level_rate": float(np.mean(
                [by_rep_converged[rep] for rep in reps])) if reps else 0.0,
            "start_level_rate": float(np.mean(
                [r["converged"] for r in mine])),
            "statistics": stats,
        }
    return {"labels": list(labels), "truth": truth.tolist(),
            "folded_truth": folded_truth.tolist(), "methods": out}


def render_montecarlo(summary):
    labels = summary["labels"]
    truth = summary["folded_truth"]
    lines = []
    for method, block in summary["methods"].items():
        lines.append(f"== {method} ==")
        lines.append(f"replications: {block['n_replications']}   "
                     f"converged (dataset level): "
                     f"{100 * block['dataset_level_rate']:.0f}%   "
                     f"(start level): {100 * block['start_level_rate']:.0f}%")
        stats = block["statistics"]
        if stats is None:
            lines.append("no converged replications; no moment statistics")
            lines.append("")
            continue
        lines.append("parameter       truth      mean      bias       std      rmse")
        for i, lab in enumerate(labels):
            lines.append(
                f"{lab:<12} {truth[i]:>9.4f} {stats['mean'][i]:>9.4f} "
                f"{stats['bias'][i]:>9.4f} {stats['std'][i]:>9.4f} "
                f"{stats['rmse'][i]:>9.4f}"
            )
        lines.append("")
    return "\n".join(lines) + "\n"


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    residuals: np.ndarray


def fit_loglog_slope(j_values, times):
    """OLS of log(time) on log(J). Needs three points to say anything."""
    j_values = np.asarray(j_values, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    if j_values.shape != times.shape or j_values.ndim != 1:
        raise InputError("j_values and times must be equal-length vectors")
    if j_values.shape[0] < 3:
        raise InputError(
            f"need at least 3 sizes to fit a scaling slope, got {j_values.shape[0]}"
        )
    if np.any(j_values <= 0) or np.any(times <= 0):
        raise InputError("sizes and times must be positive to take logs")
    lx, ly = np.log(j_values), np.log(times)
    A = np.column_stack([lx, np.ones_like(lx)])
    coef, _, _, _ = np.linalg.lstsq(A, ly, rcond=None)
    return SlopeFit(slope=float(coef[0]), intercept=float(coef[1]),
                    residuals=ly - A @ coef)


def render_thread_sweep(rows_by_method, best_threads):
    lines = []
    for method, rows in rows_by_method.items():
        lines.append(f"== {method} ==")
        lines.append("threads  criterion_s  gradient_s  total_s")
        for r in rows:
            lines.append(f"{r['threads']:>7}  {r['criterion_seconds']:>11.3f}"
                         f"  {r['gradient_seconds']:>10.3f}"
                         f"  {r['total_seconds']:>7.3f}")
        lines.append(f"fastest at {best_threads[method]} threads")
        lines.append("")
    return "\n".join(lines) + "\n"


def render_scaling(panels, slopes):
    lines = ["method        J  time_per_inner_s  inner_iters"]
    for p in panels:
        lines.append(f"{p['method']:<9} {p['J']:>5}  {p['time_per_inner_iter']:>16.6f}"
                     f"  {p['n_inner']:>11}")
    lines.append("")
    for method, fit in slopes.items():
        resid = ", ".join(f"{r:+.4f}" for r in fit.residuals)
        lines.append(f"{method}: slope {fit.slope:.3f} "
                     f"(intercept {fit.intercept:.3f}; residuals {resid})")
    return "\n".join(lines) + "\n"
