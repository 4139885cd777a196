"""Seedable Monte Carlo generator for aggregate demand panels.

Five utility characteristics per product: a constant, three exogenous
characteristics drawn once and held fixed across markets, and a price that
moves with the demand shock (so price is endogenous by construction). Six
observable cost shifters per product give the instruments bite.

Randomness is organized as keyed substreams, one per (purpose, market,
product), so enlarging the panel in J leaves existing products' draws
untouched and generation can run across markets in any order. Normal
variates come from the inverse CDF applied to the uniform stream, which pins
the draw sequence to the seed alone.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .exceptions import InputError
from .parallel import market_map
from .shares import predict_shares
from .types import MarketDataset, ModelParameters

# substream purposes; values are part of the seeding contract, do not reorder
_P_CHARS = 0
_P_XI = 1
_P_OMEGA = 2
_P_COST_NOISE = 3
_P_TASTES = 4

_DEFAULT_BETA = (0.0, 1.5, 1.5, 0.5, -3.0)
_DEFAULT_SIGMA = tuple(np.sqrt((0.5, 0.5, 0.5, 0.5, 0.2)))
_DEFAULT_X_COV = (
    (1.0, -0.8, 0.3),
    (-0.8, 1.0, 0.3),
    (0.3, 0.3, 1.0),
)


@dataclass
class DgpConfig:
    """Constants of the simulated market. Defaults are the standard design."""

    n_products: int = 25
    n_markets: int = 100
    n_draws: int = 1000
    seed: int = 0
    beta: np.ndarray = field(default_factory=lambda: np.array(_DEFAULT_BETA))
    sigma: np.ndarray = field(default_factory=lambda: np.array(_DEFAULT_SIGMA))
    x_covariance: np.ndarray = field(
        default_factory=lambda: np.array(_DEFAULT_X_COV))
    price_intercept: float = 3.0
    price_xi_coef: float = 1.5
    price_cost_coef: float = 5.0
    cost_shift_scale: float = 0.25
    cost_x_coef: float = 1.1
    n_cost_shifters: int = 6
    xi_scale: float = 1.0

    def __post_init__(self):
        if min(self.n_products, self.n_markets, self.n_draws) < 1:
            raise InputError("n_products, n_markets, n_draws must be >= 1")
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.beta.shape != (5,) or self.sigma.shape != (5,):
            raise InputError(
                "beta and sigma need five entries: constant, three "
                "characteristics, price"
            )
        self.x_covariance = np.asarray(self.x_covariance, dtype=np.float64)
        if self.x_covariance.shape != (3, 3):
            raise InputError("x_covariance must be 3x3")
        try:
            np.linalg.cholesky(self.x_covariance)
        except np.linalg.LinAlgError:
            raise InputError(
                "x_covariance must be symmetric positive definite"
            ) from None
        if self.n_cost_shifters < 1:
            raise InputError("n_cost_shifters must be >= 1")


def _stream(seed, purpose, t, j):
    return np.random.default_rng(np.random.SeedSequence((seed, purpose, t, j)))


def _normals(rng, shape):
    u = rng.random(shape)
    return ndtri(np.clip(u, 1e-15, 1.0 - 1e-15))


def price_equation(x_sum_j, xi_jt, omega_jt, config):
    """Reduced-form price: rises with the demand shock and the cost shock."""
    return (config.price_intercept + x_sum_j
            + config.price_xi_coef * xi_jt
            + config.price_cost_coef * omega_jt)


def cost_shifters(x_sum_j, omega_jt, noise_jt, config):
    """Observable cost components: a common scaled base plus own noise."""
    base = config.cost_shift_scale * np.abs(
        config.price_cost_coef * omega_jt + config.cost_x_coef * x_sum_j)
    return base + noise_jt


def draw_product_characteristics(config):
    """The three market-invariant characteristics, one substream per product."""
    L = np.linalg.cholesky(config.x_covariance)
    out = np.empty((config.n_products, 3))
    for j in range(config.n_products):
        rng = _stream(config.seed, _P_CHARS, 0, j)
        out[j] = L @ _normals(rng, 3)
    return out


def generate_dataset(config, threads=1):
    """Simulate one panel. Returns (dataset, true parameters, true utilities).

    Shares come from the choice model at the true parameters, so they are
    strictly interior whenever utilities are finite; that is asserted rather
    than handled.
    """
    J, T, N = config.n_products, config.n_markets, config.n_draws
    x_exo = draw_product_characteristics(config)
    x_sum = x_exo.sum(axis=1)

    xi = np.empty((T, J))
    omega = np.empty((T, J))
    noise = np.empty((T, J, config.n_cost_shifters))
    for t in range(T):
        for j in range(J):
            xi[t, j] = config.xi_scale * _normals(
                _stream(config.seed, _P_XI, t, j), ())
            omega[t, j] = _stream(config.seed, _P_OMEGA, t, j).random()
            noise[t, j] = _stream(config.seed, _P_COST_NOISE, t, j).random(
                config.n_cost_shifters)

    price = price_equation(x_sum[None, :], xi, omega, config)
    w = cost_shifters(x_sum[None, :, None], omega[:, :, None], noise, config)

    x = np.empty((T, J, 5))
    x[:, :, 0] = 1.0
    x[:, :, 1:4] = x_exo[None, :, :]
    x[:, :, 4] = price

    nu = np.empty((T, N, 5))
    for t in range(T):
        nu[t] = _normals(_stream(config.seed, _P_TASTES, t, 0), (N, 5))

    delta = x @ config.beta + xi
    shares = np.empty((T, J))

    def task(t):
        shares[t] = predict_shares(delta[t], x[t], nu[t], config.sigma)

    market_map(task, T, threads)
    # interior by construction: every alternative gets positive weight
    assert shares.min() > 0.0 and shares.sum(axis=1).max() < 1.0

    dataset = MarketDataset(x=x, z=build_instruments(x_exo, w), shares=shares,
                            nu=nu)
    theta = ModelParameters(beta=config.beta.copy(), sigma=config.sigma.copy())
    return dataset, theta, delta


def build_instruments(x_exo, w):
    """The standard 42-column instrument block, in fixed order.

    Columns: constant; the three characteristics in levels, squares, cubes;
    the six cost shifters in levels, squares, cubes; the product of the
    characteristics; the product of the cost shifters; then the first and
    second characteristic each crossed with every cost shifter.
    """
    x_exo = np.asarray(x_exo, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x_exo.ndim == 2:
        x_exo = np.broadcast_to(x_exo[None], (w.shape[0],) + x_exo.shape)
    if x_exo.shape[2] != 3:
        raise InputError(
            f"instrument recipe needs exactly 3 characteristics, got "
            f"{x_exo.shape[2]}"
        )
    if w.shape[2] != 6:
        raise InputError(
            f"instrument recipe needs exactly 6 cost shifters, got {w.shape[2]}"
        )
    T, J = w.shape[:2]
    cols = [
        np.ones((T, J, 1)),
        x_exo, x_exo**2, x_exo**3,
        w, w**2, w**3,
        x_exo.prod(axis=2, keepdims=True),
        w.prod(axis=2, keepdims=True),
        x_exo[:, :, [0]] * w,
        x_exo[:, :, [1]] * w,
    ]
    out = np.concatenate(cols, axis=2)
    assert out.shape[2] == 42
    return out


def group_mean_instruments(values, groups):
    """Leave-one-out group means: each row gets the average of its group
    excluding itself. Singleton groups have no peers; their rows come back
    as NaN with a warning so ingestion can decide what to do."""
    values = np.asarray(values, dtype=np.float64)
    flat_input = values.ndim == 1
    if flat_input:
        values = values[:, None]
    if values.ndim != 2:
        raise InputError("values must be one or two dimensional")
    groups = np.asarray(groups)
    if groups.shape != (values.shape[0],):
        raise InputError(
            f"need one group label per row, got {groups.shape[0]} labels "
            f"for {values.shape[0]} rows"
        )
    _, inverse, counts = np.unique(groups, return_inverse=True,
                                   return_counts=True)
    if counts.max() < 2:
        raise InputError(
            "every group is a singleton; leave-one-out means are undefined"
        )
    sums = np.zeros((counts.shape[0], values.shape[1]))
    np.add.at(sums, inverse, values)
    peers = (counts[inverse] - 1).astype(np.float64)
    out = np.full_like(values, np.nan)
    ok = peers > 0
    out[ok] = (sums[inverse[ok]] - values[ok]) / peers[ok, None]
    n_single = int((~ok).sum())
    if n_single:
        warnings.warn(
            f"{n_single} rows sit in singleton groups; their instrument "
            "values are NaN", stacklevel=2)
    return out[:, 0] if flat_input else out
