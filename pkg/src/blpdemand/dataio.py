"""CSV ingestion and emission for market data.

Two files describe a dataset. products.csv holds one row per market-product
pair with columns market_id, product_id, share, x_1..x_K, z_1..z_q and an
optional market_size column (constant within a market). draws.csv holds one
row per market-consumer pair with columns market_id, consumer_id, nu_1..nu_K
and optional demographic columns d_1..d_R. Floats are written with 17
significant digits and parsed in round-trip mode, so save followed by load
reproduces every tensor bit for bit.

Validation happens here at the file level so error messages can point at a
line and column; the dataset type re-checks value domains on construction.
"""

import re

import numpy as np
import pandas as pd

from .exceptions import InputError
from .types import MarketDataset

_FLOAT_FORMAT = "%.17g"


def _read_frame(path, name):
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except FileNotFoundError:
        raise InputError(f"{name}: file not found at {path}") from None
    except pd.errors.EmptyDataError:
        raise InputError(f"{name} is empty; a header row is required") from None
    if len(frame) == 0:
        raise InputError(f"{name} has a header but no data rows")
    return frame


def _indexed_columns(frame, prefix, name, required=True):
    """Columns named prefix_1..prefix_n, validated to have no gaps."""
    pattern = re.compile(rf"^{prefix}_(\d+)$")
    found = {}
    for col in frame.columns:
        m = pattern.match(col)
        if m:
            found[int(m.group(1))] = col
    if not found:
        if required:
            raise InputError(f"{name} has no {prefix}_1..{prefix}_n columns")
        return []
    expected = set(range(1, max(found) + 1))
    missing = sorted(expected - set(found))
    if missing:
        raise InputError(
            f"{name}: {prefix} columns must be numbered without gaps; "
            f"missing {', '.join(f'{prefix}_{i}' for i in missing)}"
        )
    return [found[i] for i in sorted(found)]


def _numeric_column(frame, col, name):
    values = pd.to_numeric(frame[col], errors="coerce").to_numpy(dtype=np.float64)
    bad = ~np.isfinite(values)
    if bad.any():
        i = int(np.argmax(bad))
        # header occupies line 1, so data row i sits on line i + 2
        raise InputError(
            f"{name} line {i + 2}, column '{col}': value {frame[col].iloc[i]!r} "
            f"is not a finite number"
        )
    return values


def _require_columns(frame, cols, name):
    missing = [c for c in cols if c not in frame.columns]
    if missing:
        raise InputError(f"{name} is missing required column '{missing[0]}'")


def _grouped_blocks(frame, name):
    """Row indices per market, markets in order of first appearance."""
    order = []
    blocks = {}
    for mid, idx in frame.groupby("market_id", sort=False).indices.items():
        order.append(mid)
        blocks[mid] = np.sort(idx)
    sizes = {mid: len(blocks[mid]) for mid in order}
    if len(set(sizes.values())) > 1:
        small = min(order, key=lambda m: sizes[m])
        big = max(order, key=lambda m: sizes[m])
        raise InputError(
            f"{name}: every market needs the same number of rows; market "
            f"{big!r} has {sizes[big]} and market {small!r} has {sizes[small]}"
        )
    return order, blocks


def _load_products(path):
    name = "products.csv"
    frame = _read_frame(path, name)
    _require_columns(frame, ("market_id", "product_id", "share"), name)
    x_cols = _indexed_columns(frame, "x", name)
    z_cols = _indexed_columns(frame, "z", name)

    share = _numeric_column(frame, "share", name)
    bad = (share <= 0.0) | (share >= 1.0)
    if bad.any():
        i = int(np.argmax(bad))
        raise InputError(
            f"{name} line {i + 2}: share must lie strictly inside (0, 1), "
            f"got {frame['share'].iloc[i]!r}"
        )
    x_mat = np.column_stack([_numeric_column(frame, c, name) for c in x_cols])
    z_mat = np.column_stack([_numeric_column(frame, c, name) for c in z_cols])
    has_size = "market_size" in frame.columns
    size_col = _numeric_column(frame, "market_size", name) if has_size else None

    order, blocks = _grouped_blocks(frame, name)
    T, J = len(order), len(blocks[order[0]])
    for mid in order:
        rows = blocks[mid]
        ids = frame["product_id"].iloc[rows]
        dup = ids[ids.duplicated()]
        if len(dup):
            raise InputError(
                f"{name}: market {mid!r} lists product {dup.iloc[0]!r} more "
                f"than once"
            )
        total = share[rows].sum()
        if total >= 1.0:
            raise InputError(
                f"{name}: market {mid!r} inside shares sum to {total!r}; the "
                f"outside share must stay positive"
            )

    shares = np.empty((T, J))
    x = np.empty((T, J, len(x_cols)))
    z = np.empty((T, J, len(z_cols)))
    market_size = np.empty(T) if has_size else None
    for t, mid in enumerate(order):
        rows = blocks[mid]
        shares[t] = share[rows]
        x[t] = x_mat[rows]
        z[t] = z_mat[rows]
        if has_size:
            vals = size_col[rows]
            if not np.all(vals == vals[0]):
                raise InputError(
                    f"{name}: market_size must be constant within market "
                    f"{mid!r}, found values {vals.min()!r} and {vals.max()!r}"
                )
            market_size[t] = vals[0]
    return order, shares, x, z, market_size


def _load_draws(path, market_order, K):
    name = "draws.csv"
    frame = _read_frame(path, name)
    _require_columns(frame, ("market_id", "consumer_id"), name)
    nu_cols = _indexed_columns(frame, "nu", name)
    d_cols = _indexed_columns(frame, "d", name, required=False)
    if len(nu_cols) != K:
        raise InputError(
            f"{name} provides {len(nu_cols)} nu columns but products.csv has "
            f"{K} characteristics"
        )
    nu_mat = np.column_stack([_numeric_column(frame, c, name) for c in nu_cols])
    d_mat = (np.column_stack([_numeric_column(frame, c, name) for c in d_cols])
             if d_cols else None)

    order, blocks = _grouped_blocks(frame, name)
    missing = [m for m in market_order if m not in blocks]
    if missing:
        raise InputError(f"{name} has no rows for market {missing[0]!r}")
    extra = [m for m in order if m not in set(market_order)]
    if extra:
        raise InputError(
            f"{name} contains markets absent from products.csv: "
            f"{', '.join(repr(m) for m in extra)}"
        )
    N = len(blocks[market_order[0]])
    nu = np.empty((len(market_order), N, K))
    demo = np.empty((len(market_order), N, d_mat.shape[1])) if d_cols else None
    for t, mid in enumerate(market_order):
        rows = blocks[mid]
        nu[t] = nu_mat[rows]
        if d_cols:
            demo[t] = d_mat[rows]
    return nu, demo


def load_dataset(products_path, draws_path):
    """Parse and validate the two-file schema into a MarketDataset."""
    order, shares, x, z, market_size = _load_products(products_path)
    nu, demo = _load_draws(draws_path, order, x.shape[2])
    return MarketDataset(x=x, z=z, shares=shares, nu=nu, demo=demo,
                         market_size=market_size)


def save_dataset(dataset, products_path, draws_path):
    """Write the two-file schema with 17-significant-digit floats."""
    T, J, K = dataset.x.shape
    q = dataset.z.shape[2]
    N = dataset.nu.shape[1]
    R = dataset.R

    mk = np.repeat(np.arange(T), J)
    cols = {"market_id": mk, "product_id": np.tile(np.arange(J), T),
            "share": dataset.shares.reshape(-1)}
    for k in range(K):
        cols[f"x_{k + 1}"] = dataset.x[:, :, k].reshape(-1)
    for k in range(q):
        cols[f"z_{k + 1}"] = dataset.z[:, :, k].reshape(-1)
    if dataset.market_size is not None:
        cols["market_size"] = np.repeat(dataset.market_size, J)
    pd.DataFrame(cols).to_csv(products_path, index=False,
                              float_format=_FLOAT_FORMAT)

    cols = {"market_id": np.repeat(np.arange(T), N),
            "consumer_id": np.tile(np.arange(N), T)}
    for k in range(K):
        cols[f"nu_{k + 1}"] = dataset.nu[:, :, k].reshape(-1)
    for r in range(R):
        cols[f"d_{r + 1}"] = dataset.demo[:, :, r].reshape(-1)
    pd.DataFrame(cols).to_csv(draws_path, index=False,
                              float_format=_FLOAT_FORMAT)


def load_config(path):
    """key=value solver settings, one per line, # starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(
                    f"{path} line {lineno}: expected key=value, got {raw.strip()!r}"
                )
            key, value = line.split("=", 1)
            key = key.strip()
            if key in out:
                raise InputError(f"{path} line {lineno}: duplicate key {key!r}")
            out[key] = value.strip()
    return out
