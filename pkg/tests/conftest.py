"""Shared test fixtures: small synthetic panels with known parameters."""

import numpy as np

from blpdemand.shares import predict_shares
from blpdemand.types import MarketDataset, ModelParameters


def polynomial_instruments(x):
    """Characteristic polynomials as instruments: x, x^2, x^3, and pairwise
    products. Gives q = 3K + K(K-1)/2, enough for the order condition at
    small K with one demographic."""
    T, J, K = x.shape
    blocks = [x, x**2, x**3]
    for a in range(K):
        for b in range(a + 1, K):
            blocks.append((x[:, :, a] * x[:, :, b])[:, :, None])
    return np.concatenate(blocks, axis=2)


def synthetic_dataset(seed, n_markets=4, n_products=5, n_chars=3, n_draws=40,
                      n_demo=0, sigma_scale=0.6, xi_scale=0.25, beta=None,
                      sigma=None):
    """A small panel with shares generated by the model itself.

    Returns (dataset, theta_true, delta_true). Shares come out of the choice
    model, so validity (positive, inside sum below one) is automatic.
    """
    rng = np.random.default_rng(seed)
    K, R = n_chars, n_demo
    if beta is None:
        beta = rng.uniform(-1.0, 1.0, K)
    else:
        beta = np.asarray(beta, dtype=np.float64)
        rng.uniform(-1.0, 1.0, K)
    if sigma is None:
        sigma = sigma_scale * rng.uniform(0.3, 1.0, K)
    else:
        sigma = np.asarray(sigma, dtype=np.float64)
        rng.uniform(0.3, 1.0, K)
    pi = 0.5 * rng.uniform(-1.0, 1.0, (K, R)) if R else None
    x = rng.standard_normal((n_markets, n_products, K))
    nu = rng.standard_normal((n_markets, n_draws, K))
    demo = rng.standard_normal((n_markets, n_draws, R)) if R else None
    xi = xi_scale * rng.standard_normal((n_markets, n_products))
    delta = x @ beta + xi
    shares = np.empty((n_markets, n_products))
    for t in range(n_markets):
        shares[t] = predict_shares(delta[t], x[t], nu[t], sigma,
                                   None if demo is None else demo[t], pi)
    dataset = MarketDataset(x=x, z=polynomial_instruments(x), shares=shares,
                            nu=nu, demo=demo)
    theta = ModelParameters(beta=beta, sigma=sigma, pi=pi)
    return dataset, theta, delta
