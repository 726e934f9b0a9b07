"""Trip telemetry preparation.

GPS fixes are projected to UTM, velocities are differenced from consecutive
positions and rescaled to the reported GPS speed, and accelerations are split
into a signed longitudinal (along-velocity) part and a non-negative lateral
part.  Trips are then cut into runs of positive speed with valid
accelerations.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

RAW_COLUMNS = ("trip_id", "t", "lat", "lon", "speed_kmh")
DERIVED_COLUMNS = ("trip_id", "t", "speed_kmh", "a_long", "a_lat")
SEGMENT_COLUMNS = ("trip_id", "sub_id", "t", "speed_kmh", "a_long", "a_lat")
RESPONSES = ("speed_kmh", "a_long", "a_lat")

KMH_TO_MS = 1000.0 / 3600.0

# mode -> (min trip duration [s], min trip observations, min sub-interval observations)
FILTERS = {
    "train": (180.0, 10, 10),
    "eval": (30.0, 10, 2),
}


class InputFormatError(ValueError):
    pass


# --- UTM ---------------------------------------------------------------------

_A = 6378137.0
_F = 1 / 298.257223563
_K0 = 0.9996
_N = _F / (2 - _F)
_RECT = _A / (1 + _N) * (1 + _N**2 / 4 + _N**4 / 64 + _N**6 / 256)
_ALPHA = (
    _N / 2 - 2 * _N**2 / 3 + 5 * _N**3 / 16 + 41 * _N**4 / 180 - 127 * _N**5 / 288 + 7891 * _N**6 / 37800,
    13 * _N**2 / 48 - 3 * _N**3 / 5 + 557 * _N**4 / 1440 + 281 * _N**5 / 630 - 1983433 * _N**6 / 1935360,
    61 * _N**3 / 240 - 103 * _N**4 / 140 + 15061 * _N**5 / 26880 + 167603 * _N**6 / 181440,
    49561 * _N**4 / 161280 - 179 * _N**5 / 168 + 6601661 * _N**6 / 7257600,
    34729 * _N**5 / 80640 - 3418889 * _N**6 / 1995840,
    212378941 * _N**6 / 319334400,
)
_ECC = 2 * math.sqrt(_N) / (1 + _N)


def utm_zone(lat: float, lon: float) -> int:
    zone = int((lon + 180) // 6) + 1
    if zone > 60:
        zone = 60
    if 56 <= lat < 64 and 3 <= lon < 12:
        return 32
    if 72 <= lat < 84 and 0 <= lon < 42:
        return (31, 33, 35, 37)[min(int((lon + 3) // 12), 3)]
    return zone


def to_utm(lat, lon, zone: int | None = None, south: bool | None = None):
    """Forward UTM projection on the WGS-84 ellipsoid (Krüger series to 6th order).

    ``zone`` and ``south`` default to those of the first point, so a whole
    trip lands in one zone.  Returns ``(easting, northing, zone)``.
    """
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    if np.any(np.abs(lat) > 84):
        raise ValueError("UTM is undefined beyond 84 degrees latitude")
    if np.any(np.abs(lon) > 180):
        raise ValueError("longitude out of range")
    first_lat = float(lat.flat[0])
    first_lon = float(lon.flat[0])
    if zone is None:
        zone = utm_zone(first_lat, first_lon)
    if south is None:
        south = first_lat < 0
    lam0 = math.radians((zone - 1) * 6 - 180 + 3)
    phi = np.radians(lat)
    lam = np.radians(lon) - lam0

    sphi = np.sin(phi)
    t = np.sinh(np.arctanh(sphi) - _ECC * np.arctanh(_ECC * sphi))
    xi_p = np.arctan2(t, np.cos(lam))
    eta_p = np.arctanh(np.sin(lam) / np.sqrt(1 + t**2))
    xi = xi_p.copy()
    eta = eta_p.copy()
    for j, a in enumerate(_ALPHA, start=1):
        xi = xi + a * np.sin(2 * j * xi_p) * np.cosh(2 * j * eta_p)
        eta = eta + a * np.cos(2 * j * xi_p) * np.sinh(2 * j * eta_p)
    easting = 500000.0 + _K0 * _RECT * eta
    northing = _K0 * _RECT * xi + (10000000.0 if south else 0.0)
    return easting, northing, zone


# --- accelerations -----------------------------------------------------------


def decompose(v, a):
    """Split acceleration ``a`` into components along and across velocity ``v``.

    Works row-wise on (..., 2) arrays; rows with zero speed give NaN.
    """
    v = np.asarray(v, dtype=float)
    a = np.asarray(a, dtype=float)
    speed = np.linalg.norm(v, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        a_long = np.where(speed > 0, np.sum(v * a, axis=-1) / speed, np.nan)
    a_lat = np.sqrt(np.maximum(np.sum(a * a, axis=-1) - a_long**2, 0.0))
    return a_long, np.where(np.isnan(a_long), np.nan, a_lat)


def accelerations_from_positions(t, easting, northing, speed_ms):
    """Longitudinal and lateral acceleration from planar positions.

    Velocity at row ``l`` (l >= 1) is the secant velocity from row ``l-1``,
    rescaled to the GPS speed at row ``l``.  The acceleration between rows
    ``l`` and ``l+1`` is attributed to row ``l``; the first and last rows are
    therefore missing.
    """
    t = np.asarray(t, dtype=float)
    pos = np.column_stack([easting, northing]).astype(float)
    speed_ms = np.asarray(speed_ms, dtype=float)
    n = len(t)
    a_long = np.full(n, np.nan)
    a_lat = np.full(n, np.nan)
    if n < 3:
        return a_long, a_lat

    dt = np.diff(t)
    secant = np.diff(pos, axis=0) / dt[:, None]
    norm = np.linalg.norm(secant, axis=1)
    vel = np.full((n, 2), np.nan)
    gps = speed_ms[1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = secant * (gps / norm)[:, None]
    vel[1:] = np.where((gps == 0)[:, None], 0.0, np.where((norm > 0)[:, None], scaled, np.nan))

    acc = (vel[2:] - vel[1:-1]) / dt[1:, None]
    lo, la = decompose(vel[1:-1], acc)
    a_long[1:-1] = lo
    a_lat[1:-1] = la
    return a_long, a_lat


def derive_accelerations(records: pd.DataFrame) -> pd.DataFrame:
    """Aligned observations for one trip.

    ``records`` has columns ``t, lat, lon, speed_kmh``.  Output keeps one row
    per (de-duplicated) input row with ``t, speed_kmh, a_long, a_lat,
    easting, northing``; speed stays in km/h, accelerations are m/s^2.
    """
    out_cols = ["t", "speed_kmh", "a_long", "a_lat", "easting", "northing"]
    df = records.sort_values("t", kind="stable").drop_duplicates("t", keep="first")
    if len(df) < len(records):
        log.info("dropped %d duplicate timestamps", len(records) - len(df))
    if len(df) < 3:
        log.warning("trip has %d records; at least 3 are needed for accelerations", len(df))
        return pd.DataFrame(columns=out_cols)
    if np.any(df["speed_kmh"].to_numpy() < 0):
        raise ValueError("speed must be non-negative")
    e, n, _ = to_utm(df["lat"].to_numpy(), df["lon"].to_numpy())
    a_long, a_lat = accelerations_from_positions(
        df["t"].to_numpy(), e, n, df["speed_kmh"].to_numpy() * KMH_TO_MS
    )
    return pd.DataFrame(
        {
            "t": df["t"].to_numpy(dtype=float),
            "speed_kmh": df["speed_kmh"].to_numpy(dtype=float),
            "a_long": a_long,
            "a_lat": a_lat,
            "easting": e,
            "northing": n,
        }
    )


# --- segmentation ------------------------------------------------------------


@dataclass
class SubInterval:
    """A run of moving observations; ``y`` rows are (speed_kmh, a_long, a_lat)."""

    trip_id: object
    sub_id: int
    t: np.ndarray
    y: np.ndarray
    start_index: int = 0
    end_index: int = 0  # exclusive
    usage: str = "train"
    driver_id: object = None

    def __len__(self):
        return len(self.t)


@dataclass
class TripSeries:
    trip_id: object
    driver_id: object
    duration: float
    sub_intervals: list[SubInterval] = field(default_factory=list)


def candidate_runs(speed, valid) -> list[tuple[int, int]]:
    """Maximal half-open index ranges with speed > 0 and valid accelerations."""
    ok = (np.asarray(speed, dtype=float) > 0) & np.asarray(valid, dtype=bool)
    padded = np.concatenate([[False], ok, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return [(int(s), int(e)) for s, e in zip(edges[::2], edges[1::2])]


def segment(trip: pd.DataFrame, mode: str = "train", trip_id=None, driver_id=None) -> TripSeries:
    """Cut one aligned trip into sub-intervals and apply the ``mode`` filters."""
    if mode not in FILTERS:
        raise ValueError(f"mode must be one of {sorted(FILTERS)}")
    min_dur, min_obs, min_sub = FILTERS[mode]
    t = trip["t"].to_numpy(dtype=float)
    duration = float(t[-1] - t[0]) if len(t) else 0.0
    series = TripSeries(trip_id, driver_id, duration)
    if len(t) < min_obs or duration < min_dur:
        return series
    y = trip[list(RESPONSES)].to_numpy(dtype=float)
    valid = np.all(np.isfinite(y), axis=1)
    for s, e in candidate_runs(y[:, 0], valid):
        if e - s < min_sub:
            continue
        series.sub_intervals.append(
            SubInterval(trip_id, len(series.sub_intervals), t[s:e], y[s:e], s, e, mode, driver_id)
        )
    return series


# --- CSV ---------------------------------------------------------------------


def _require(df: pd.DataFrame, cols, what: str):
    missing = [c for c in cols if c not in df.columns]
    if missing:
        raise InputFormatError(f"{what} is missing column(s): {', '.join(missing)}")


def read_trips_csv(path) -> pd.DataFrame:
    """Read raw GPS or pre-derived telemetry, returning aligned rows.

    Raw files (``trip_id,t,lat,lon,speed_kmh``) go through the UTM stage;
    pre-derived files (``trip_id,t,speed_kmh,a_long,a_lat``) pass through.
    An optional ``driver_id`` column is carried along.
    """
    df = pd.read_csv(path)
    has_driver = "driver_id" in df.columns
    if {"lat", "lon"} <= set(df.columns):
        _require(df, RAW_COLUMNS, str(path))
        parts = []
        for tid, g in df.groupby("trip_id", sort=True):
            out = derive_accelerations(g[["t", "lat", "lon", "speed_kmh"]])
            out.insert(0, "trip_id", tid)
            if has_driver:
                out.insert(0, "driver_id", g["driver_id"].iloc[0])
            parts.append(out.drop(columns=["easting", "northing"]))
        cols = (["driver_id"] if has_driver else []) + ["trip_id", "t", *RESPONSES]
        return pd.concat(parts, ignore_index=True) if parts else pd.DataFrame(columns=cols)
    _require(df, DERIVED_COLUMNS, str(path))
    df = df.sort_values(["trip_id", "t"], kind="stable").drop_duplicates(["trip_id", "t"])
    return df.reset_index(drop=True)


def segment_frame(df: pd.DataFrame, mode: str) -> tuple[list[TripSeries], dict]:
    """Segment every trip in an aligned frame; returns trips and filter counts."""
    trips = []
    counts = {"trips_in": 0, "trips_kept": 0, "sub_intervals": 0, "observations": 0}
    for tid, g in df.groupby("trip_id", sort=True):
        counts["trips_in"] += 1
        driver = g["driver_id"].iloc[0] if "driver_id" in g.columns else None
        series = segment(g, mode, trip_id=tid, driver_id=driver)
        if series.sub_intervals:
            counts["trips_kept"] += 1
            counts["sub_intervals"] += len(series.sub_intervals)
            counts["observations"] += sum(len(s) for s in series.sub_intervals)
        trips.append(series)
    return trips, counts


def segments_to_frame(trips: list[TripSeries], dims: Sequence[str] = RESPONSES) -> pd.DataFrame:
    """Long table with one row per observation; ``dims`` names the response columns."""
    rows = []
    for trip in trips:
        for sub in trip.sub_intervals:
            part = pd.DataFrame(sub.y, columns=list(dims))
            part.insert(0, "t", sub.t)
            part.insert(0, "sub_id", sub.sub_id)
            part.insert(0, "trip_id", sub.trip_id)
            if trip.driver_id is not None:
                part.insert(0, "driver_id", trip.driver_id)
            rows.append(part)
    if not rows:
        return pd.DataFrame(columns=list(SEGMENT_COLUMNS))
    return pd.concat(rows, ignore_index=True)


def read_segments_csv(path, usage: str = "train") -> list[TripSeries]:
    df = pd.read_csv(path)
    _require(df, SEGMENT_COLUMNS, str(path))
    return trips_from_frame(df, usage)


def trips_from_frame(df: pd.DataFrame, usage: str = "train") -> list[TripSeries]:
    trips = []
    has_driver = "driver_id" in df.columns
    for tid, g in df.groupby("trip_id", sort=True):
        driver = g["driver_id"].iloc[0] if has_driver else None
        subs = []
        for sid, h in g.groupby("sub_id", sort=True):
            h = h.sort_values("t", kind="stable")
            subs.append(
                SubInterval(
                    tid,
                    int(sid),
                    h["t"].to_numpy(dtype=float),
                    h[list(RESPONSES)].to_numpy(dtype=float),
                    0,
                    len(h),
                    usage,
                    driver,
                )
            )
        t = g["t"].to_numpy(dtype=float)
        trips.append(TripSeries(tid, driver, float(t.max() - t.min()), subs))
    return trips
