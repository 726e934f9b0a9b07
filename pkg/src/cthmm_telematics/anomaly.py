"""Forecast pseudo-residuals, anomaly indices and driver-level tail statistics."""

from __future__ import annotations

import logging
import math
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from scipy.special import ndtri

from .inference import predictive_batch
from .model import CTHMM

log = logging.getLogger(__name__)

U_CLAMP = 1e-12
DEFAULT_THRESHOLD = 3.0
TAIL_LEVELS = (0.90, 0.95, 0.97, 0.975, 0.98, 0.985, 0.99, 0.995)
RESIDUAL_COLUMNS = ["trip_id", "sub_id", "t", "dim", "u", "z", "outlier"]


def tail_column(alpha: float) -> str:
    """Column label for a tail level, e.g. 0.975 -> ``p97_5``."""
    return "p" + f"{alpha * 100:g}".replace(".", "_")


TAIL_COLUMNS = [tail_column(a) for a in TAIL_LEVELS]


def dim_suffix(dim: str) -> str:
    return dim[2:] if dim.startswith("a_") else dim


def z_from_u(u) -> np.ndarray:
    """Standard normal quantile of ``u`` after clamping away from 0 and 1."""
    return ndtri(np.clip(np.asarray(u, dtype=float), U_CLAMP, 1 - U_CLAMP))


def mixture_pit(model: CTHMM, weights: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Probability integral transform under state mixtures.

    ``weights`` is (T, S) and ``y`` is (T, D); entry ``[l, d]`` is
    ``sum_v weights[l, v] * F_{v,d}(y[l, d])``.
    """
    y = np.atleast_2d(y)
    u = np.zeros(y.shape)
    for v, row in enumerate(model.emissions):
        for d, fam in enumerate(row):
            u[:, d] += weights[:, v] * fam.pit(y[:, d])
    return u


def _sub_records(model: CTHMM, sub, pred, excluded, threshold) -> pd.DataFrame:
    n = len(sub.t)
    if n < 2:
        return pd.DataFrame(columns=RESIDUAL_COLUMNS)
    u = mixture_pit(model, pred[1:], np.asarray(sub.y)[1:])
    u[excluded[1:]] = np.nan
    z = z_from_u(u)
    D = model.n_dims
    frame = pd.DataFrame(
        {
            "trip_id": sub.trip_id,
            "sub_id": sub.sub_id,
            "t": np.repeat(np.asarray(sub.t, dtype=float)[1:], D),
            "dim": np.tile(np.array(model.dims, dtype=object), n - 1),
            "u": u.ravel(),
            "z": z.ravel(),
        }
    )
    frame["outlier"] = np.abs(frame["z"].to_numpy()) >= threshold
    return frame


def pseudo_residuals(model: CTHMM, trip, threshold: float = DEFAULT_THRESHOLD) -> pd.DataFrame:
    """Normal forecast pseudo-residuals for every sub-interval of one trip.

    Rows are ordered by sub-interval, time, then dimension.  Observations with
    zero density under every state get ``u = z = NaN`` and are never outliers.
    """
    return residuals_frame(model, [trip], threshold)


def residuals_frame(model: CTHMM, trips: Sequence, threshold: float = DEFAULT_THRESHOLD) -> pd.DataFrame:
    """Residual records of several trips, in input order.

    Each trip is filtered on its own so its residuals never depend on which
    other trips share the call.
    """
    parts, n_short, n_excl = [], 0, 0
    for trip in trips:
        subs = trip.sub_intervals
        n_short += sum(len(s.t) < 2 for s in subs)
        preds = predictive_batch(model, subs)
        parts += [_sub_records(model, s, p, e, threshold) for s, (p, e) in zip(subs, preds) if len(s.t) >= 2]
        n_excl += sum(int(e[1:].sum()) for _, e in preds)
    if n_short:
        log.warning("%d sub-interval(s) with fewer than 2 observations carry no residuals", n_short)
    if n_excl:
        log.warning("%d observation(s) outside every emission support were excluded", n_excl)
    if not parts:
        return pd.DataFrame(columns=RESIDUAL_COLUMNS)
    return pd.concat(parts, ignore_index=True)[RESIDUAL_COLUMNS]


def anomaly_index(z_values, threshold: float = DEFAULT_THRESHOLD) -> float:
    """Share of residual-bearing values with ``|z| >= threshold``; NaN marks exclusions."""
    z = np.asarray(z_values, dtype=float)
    z = z[~np.isnan(z)]
    if z.size == 0:
        raise ValueError("no residual-bearing observations")
    return float(np.count_nonzero(np.abs(z) >= threshold) / z.size)


def normalize_indices(values) -> np.ndarray:
    """Divide by the maximum; an all-zero vector stays zero."""
    a = np.asarray(values, dtype=float)
    if a.size == 0:
        raise ValueError("need at least one trip")
    top = a.max()
    return np.zeros_like(a) if top <= 0 else a / top


def driver_tail(values, levels: Iterable[float] = TAIL_LEVELS) -> dict:
    """Maximum and lower empirical quantiles ``inf{p : F(p) >= alpha}``."""
    a = np.sort(np.asarray(values, dtype=float))
    n = a.size
    if n == 0:
        raise ValueError("need at least one trip")
    out = {"max": float(a[-1])}
    for alpha in levels:
        # rounding guards against alpha * n landing a hair above an integer
        k = max(1, math.ceil(round(alpha * n, 9)))
        out[tail_column(alpha)] = float(a[k - 1])
    return out


def trip_indices(
    residuals: pd.DataFrame,
    dims: Sequence[str],
    threshold: float | None = None,
    drivers: dict | None = None,
) -> pd.DataFrame:
    """Per-trip raw and driver-normalized anomaly indices.

    ``threshold=None`` uses the stored outlier flags; otherwise flags are
    recomputed from ``z``.  ``drivers`` maps trip id to driver id (default 0).
    """
    drivers = drivers or {}
    rows = []
    for trip_id, grp in residuals.groupby("trip_id", sort=False):
        row = {"driver_id": drivers.get(trip_id, 0), "trip_id": trip_id}
        n_resid = None
        for dim in dims:
            sel = grp[grp["dim"] == dim]
            valid = sel["z"].notna().to_numpy()
            if threshold is None:
                hits = sel["outlier"].to_numpy().astype(bool) & valid
            else:
                hits = (np.abs(sel["z"].to_numpy()) >= threshold) & valid
            n_valid = int(valid.sum())
            n_resid = n_valid if n_resid is None else max(n_resid, n_valid)
            row["A_" + dim_suffix(dim)] = hits.sum() / n_valid if n_valid else np.nan
        if not n_resid:
            log.warning("trip %r has no residual-bearing observations and is dropped", trip_id)
            continue
        row["n_resid"] = n_resid
        rows.append(row)
    a_cols = ["A_" + dim_suffix(d) for d in dims]
    n_cols = ["An_" + dim_suffix(d) for d in dims]
    out = pd.DataFrame(rows, columns=["driver_id", "trip_id", "n_resid", *a_cols])
    for a_col, n_col in zip(a_cols, n_cols):
        out[n_col] = out.groupby("driver_id")[a_col].transform(lambda s: normalize_indices(s.fillna(0.0)))
    out = out.sort_values(["driver_id", "trip_id"], kind="stable").reset_index(drop=True)
    return out[["driver_id", "trip_id", "n_resid", *a_cols, *n_cols]]


def driver_tails(indices: pd.DataFrame, dims: Sequence[str]) -> pd.DataFrame:
    """Tail statistics of each driver's raw indices, one row per driver and dimension."""
    rows = []
    for driver_id, grp in indices.groupby("driver_id", sort=True):
        for dim in dims:
            col = "A_" + dim_suffix(dim)
            stats = driver_tail(grp[col].dropna().to_numpy())
            rows.append({"driver_id": driver_id, "dim": dim_suffix(dim), **stats, "n_trips": len(grp)})
    return pd.DataFrame(rows, columns=["driver_id", "dim", "max", *TAIL_COLUMNS, "n_trips"])
