"""Core data containers: parameters, datasets, solver configuration, results."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .exceptions import InputError


def _as_float_array(a, name, ndim=None):
    out = np.asarray(a, dtype=np.float64)
    if ndim is not None and out.ndim != ndim:
        raise InputError(f"{name} must have {ndim} dimensions, got {out.ndim}")
    if not np.all(np.isfinite(out)):
        bad = np.argwhere(~np.isfinite(out))[0]
        raise InputError(f"{name} contains a non-finite entry at index {tuple(bad)}")
    return out


@dataclass
class ModelParameters:
    """Demand parameters: mean tastes, taste dispersions, demographic loadings.

    beta : (K,) coefficients on product characteristics in mean utility.
    sigma : (K,) dispersion of the random coefficient on each characteristic.
    pi : (K, R) loadings of demographics onto characteristic tastes, or None
        when the model has no demographics (R = 0).
    """

    beta: np.ndarray
    sigma: np.ndarray
    pi: np.ndarray | None = None

    def __post_init__(self):
        self.beta = _as_float_array(self.beta, "beta", ndim=1)
        self.sigma = _as_float_array(self.sigma, "sigma", ndim=1)
        if self.beta.shape != self.sigma.shape:
            raise InputError(
                f"beta and sigma must share length, got {self.beta.shape[0]} "
                f"and {self.sigma.shape[0]}"
            )
        if self.pi is not None:
            self.pi = _as_float_array(self.pi, "pi", ndim=2)
            if self.pi.shape[0] != self.beta.shape[0]:
                raise InputError(
                    f"pi must have one row per characteristic, got {self.pi.shape}"
                )
            if self.pi.shape[1] == 0:
                self.pi = None

    @property
    def n_characteristics(self):
        return self.beta.shape[0]

    @property
    def n_demographics(self):
        return 0 if self.pi is None else self.pi.shape[1]

    def sigma_part(self):
        """Flatten (sigma, pi) into one vector: sigma block then pi row-major."""
        if self.pi is None:
            return self.sigma.copy()
        return np.concatenate([self.sigma, self.pi.ravel()])

    def as_vector(self):
        """Full parameter vector (beta, sigma, pi row-major)."""
        return np.concatenate([self.beta, self.sigma_part()])

    @classmethod
    def from_vector(cls, vec, n_characteristics, n_demographics=0):
        vec = _as_float_array(vec, "parameter vector", ndim=1)
        K, R = n_characteristics, n_demographics
        if vec.shape[0] != 2 * K + K * R:
            raise InputError(
                f"parameter vector has length {vec.shape[0]}, expected {2 * K + K * R}"
            )
        beta = vec[:K]
        sigma = vec[K : 2 * K]
        pi = vec[2 * K :].reshape(K, R) if R > 0 else None
        return cls(beta=beta, sigma=sigma, pi=pi)


def split_sigma_part(sigma_part, n_characteristics, n_demographics=0):
    """Undo ModelParameters.sigma_part: return (sigma, pi-or-None)."""
    sigma_part = np.asarray(sigma_part, dtype=np.float64)
    K, R = n_characteristics, n_demographics
    if sigma_part.shape[0] != K + K * R:
        raise InputError(
            f"sigma-part vector has length {sigma_part.shape[0]}, expected {K + K * R}"
        )
    sigma = sigma_part[:K]
    pi = sigma_part[K:].reshape(K, R) if R > 0 else None
    return sigma, pi


@dataclass(eq=False)
class MarketDataset:
    """Aggregate demand data for T markets with J inside products each.

    x : (T, J, K) product characteristics (may include price).
    z : (T, J, q) instruments.
    shares : (T, J) observed inside shares; each market must leave a strictly
        positive outside share.
    nu : (T, N, K) consumer taste draws, treated as fixed and known.
    demo : (T, N, R) consumer demographics, or None when R = 0.
    market_size : (T,) optional market sizes carried through for reporting.
    """

    x: np.ndarray
    z: np.ndarray
    shares: np.ndarray
    nu: np.ndarray
    demo: np.ndarray | None = None
    market_size: np.ndarray | None = None

    def __post_init__(self):
        self.x = _as_float_array(self.x, "x", ndim=3)
        self.z = _as_float_array(self.z, "z", ndim=3)
        self.shares = _as_float_array(self.shares, "shares", ndim=2)
        self.nu = _as_float_array(self.nu, "nu", ndim=3)
        T, J, K = self.x.shape
        if self.z.shape[:2] != (T, J):
            raise InputError(f"z has leading shape {self.z.shape[:2]}, expected {(T, J)}")
        if self.shares.shape != (T, J):
            raise InputError(f"shares has shape {self.shares.shape}, expected {(T, J)}")
        if self.nu.shape[0] != T or self.nu.shape[2] != K:
            raise InputError(
                f"nu has shape {self.nu.shape}, expected ({T}, N, {K})"
            )
        if self.nu.shape[1] < 1:
            raise InputError("nu must contain at least one consumer draw per market")
        if self.demo is not None:
            self.demo = _as_float_array(self.demo, "demo", ndim=3)
            if self.demo.shape[:2] != self.nu.shape[:2]:
                raise InputError(
                    f"demo has leading shape {self.demo.shape[:2]}, expected "
                    f"{self.nu.shape[:2]}"
                )
            if self.demo.shape[2] == 0:
                self.demo = None
        if self.market_size is not None:
            self.market_size = _as_float_array(self.market_size, "market_size", ndim=1)
            if self.market_size.shape != (T,):
                raise InputError(
                    f"market_size has shape {self.market_size.shape}, expected ({T},)"
                )
        bad = np.argwhere((self.shares <= 0.0) | (self.shares >= 1.0))
        if bad.size:
            t, j = bad[0]
            raise InputError(
                f"shares must lie strictly inside (0, 1); market {t}, product {j} "
                f"has share {self.shares[t, j]!r}"
            )
        inside = self.shares.sum(axis=1)
        if np.any(inside >= 1.0):
            t = int(np.argmax(inside >= 1.0))
            raise InputError(
                f"inside shares in market {t} sum to {inside[t]!r}; the outside "
                "share must be strictly positive"
            )
        if self.q < 2 * K + K * self.R:
            raise InputError(
                f"order condition fails: {self.q} instruments for "
                f"{2 * K + K * self.R} parameters"
            )

    @property
    def T(self):
        return self.x.shape[0]

    @property
    def J(self):
        return self.x.shape[1]

    @property
    def K(self):
        return self.x.shape[2]

    @property
    def q(self):
        return self.z.shape[2]

    @property
    def N(self):
        return self.nu.shape[1]

    @property
    def R(self):
        return 0 if self.demo is None else self.demo.shape[2]

    @property
    def n_obs(self):
        return self.T * self.J

    @cached_property
    def log_shares(self):
        return np.log(self.shares)

    @cached_property
    def outside_shares(self):
        return 1.0 - self.shares.sum(axis=1)

    @cached_property
    def x_flat(self):
        return self.x.reshape(self.n_obs, self.K)

    @cached_property
    def z_flat(self):
        return self.z.reshape(self.n_obs, self.q)

    def demo_t(self, t):
        return None if self.demo is None else self.demo[t]

    def n_parameters(self):
        return 2 * self.K + self.K * self.R

    def logit_delta(self):
        """Mean utilities implied by zero taste dispersion: ln s - ln s0."""
        return self.log_shares - np.log(self.outside_shares)[:, None]


@dataclass
class InversionSettings:
    """Controls for the market-level share inversion solvers."""

    tol_delta: float = 1e-12
    max_iter_contraction: int = 5000
    max_iter_newton: int = 100
    cond_limit: float = 1e12

    def __post_init__(self):
        if self.tol_delta <= 0:
            raise InputError("tol_delta must be positive")
        if self.max_iter_contraction < 1 or self.max_iter_newton < 1:
            raise InputError("iteration caps must be positive")
        if self.cond_limit <= 1:
            raise InputError("cond_limit must exceed 1")


@dataclass
class SolverConfig:
    """Controls for the outer estimation loops."""

    tol_outer: float = 1e-6
    max_outer: int = 100
    n_starts: int = 5
    thread_count: int = 1
    inner_gtol: float = 1e-8
    inner_max_iter: int = 500
    inversion: InversionSettings = field(default_factory=InversionSettings)
    finite_difference_gradients: bool = False
    concurrent_starts: bool = False

    def __post_init__(self):
        if self.tol_outer <= 0:
            raise InputError("tol_outer must be positive")
        if self.max_outer < 1:
            raise InputError("max_outer must be positive")
        if self.n_starts < 1:
            raise InputError("n_starts must be positive")
        if self.thread_count < 1:
            raise InputError("thread_count must be positive")


@dataclass
class EstimationState:
    """One outer iterate: mean utilities, outside probabilities, parameters."""

    delta: np.ndarray
    lam: np.ndarray | None
    theta: ModelParameters
    outer_iter: int


@dataclass
class TimingPanels:
    """Per-fit timing and evaluation counts.

    n_inner counts quasi-Newton steps of whichever loop the method treats as
    inner (the pseudo-criterion minimizations for the nested methods, the
    share inversions for the fixed-point method). Criterion-with-gradient and
    criterion-only evaluations are counted separately.
    """

    wall_clock_total: float = 0.0
    wall_clock_inner: float = 0.0
    wall_clock_evals: float = 0.0
    n_outer: int = 0
    n_inner: int = 0
    n_criterion_evals: int = 0
    n_criterion_only_evals: int = 0

    @property
    def time_per_inner_iter(self):
        return self.wall_clock_inner / self.n_inner if self.n_inner else float("nan")

    @property
    def time_per_criterion_eval(self):
        n = self.n_criterion_evals + self.n_criterion_only_evals
        return self.wall_clock_evals / n if n else float("nan")

    def as_dict(self):
        return {
            "wall_clock_total": self.wall_clock_total,
            "wall_clock_inner": self.wall_clock_inner,
            "wall_clock_evals": self.wall_clock_evals,
            "time_per_inner_iter": self.time_per_inner_iter,
            "time_per_criterion_eval": self.time_per_criterion_eval,
            "n_outer": self.n_outer,
            "n_inner": self.n_inner,
            "n_criterion_evals": self.n_criterion_evals,
            "n_criterion_only_evals": self.n_criterion_only_evals,
        }


@dataclass
class FitResult:
    """Outcome of one estimation run from one start."""

    method: str
    theta_hat: ModelParameters
    delta_hat: np.ndarray
    lambda_hat: np.ndarray | None
    criterion_value: float
    converged: bool
    timings: TimingPanels
    start_index: int = 0
    message: str = ""
    diagnostics: dict = field(default_factory=dict)

    @property
    def outer_iterations(self):
        return self.timings.n_outer

    @property
    def inner_iterations(self):
        return self.timings.n_inner


@dataclass
class VarianceReport:
    """Asymptotic variance estimates and standard errors for one fit.

    v_np corrects for estimating the outside probabilities alongside the
    parameters; v_gmm is the benchmark variance of the standard estimator
    with derivatives through the solved probabilities. Standard errors
    scale the diagonal by the number of product-market observations.
    """

    v_np: np.ndarray
    v_gmm: np.ndarray
    omega_tt: np.ndarray
    omega_tl_times_lambda: np.ndarray
    se_np: np.ndarray
    se_gmm: np.ndarray
