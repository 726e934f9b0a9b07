"""Reader for the public UAH-DriveSet folder layout.

Each trip folder (e.g. ``20151110175712-16km-D1-NORMAL1-SECONDARY``) holds a
1 Hz ``RAW_GPS.txt`` and a 10 Hz ``RAW_ACCELEROMETERS.txt``.  Speed comes from
the GPS file; the Kalman-filtered ``Z_KF`` (longitudinal) and ``Y_KF``
(lateral) accelerometer channels are sampled at the GPS timestamps.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .prep import RESPONSES, InputFormatError, SubInterval, TripSeries, candidate_runs

GPS_COLUMNS = ["t", "speed_kmh", "lat", "lon", "altitude", "vert_acc", "horiz_acc", "course", "dif_course"]
ACC_COLUMNS = ["t", "active", "acc_x", "acc_y", "acc_z", "x_kf", "y_kf", "z_kf", "roll", "pitch", "yaw"]
_FOLDER = re.compile(r"-(D\d+)-([A-Z]+\d*)-(SECONDARY|MOTORWAY)$", re.IGNORECASE)


@dataclass
class UAHTrip:
    driver: str
    behaviour: str  # NORMAL1, NORMAL2, NORMAL, AGGRESSIVE, DROWSY
    road: str  # SECONDARY or MOTORWAY
    path: Path

    @property
    def label(self) -> str:
        return f"{self.road[0].upper()}-{self.behaviour.capitalize()}"

    @property
    def aggressive(self) -> bool:
        return self.behaviour.upper().startswith("AGGRESSIVE")


def _read_table(path: Path, names: list[str]) -> pd.DataFrame:
    if not path.exists():
        raise InputFormatError(f"missing file {path}")
    df = pd.read_csv(path, sep=r"\s+", header=None, engine="python")
    if df.shape[1] < len(names):
        raise InputFormatError(f"{path}: expected at least {len(names)} columns, found {df.shape[1]}")
    df = df.iloc[:, : len(names)]
    df.columns = names
    return df


def read_gps(path) -> pd.DataFrame:
    return _read_table(Path(path), GPS_COLUMNS)


def read_accelerometers(path) -> pd.DataFrame:
    return _read_table(Path(path), ACC_COLUMNS)


def align(gps: pd.DataFrame, acc: pd.DataFrame) -> pd.DataFrame:
    """One row per GPS fix with the nearest-in-time filtered accelerations."""
    gps = gps.sort_values("t", kind="stable").drop_duplicates("t")
    acc = acc.sort_values("t", kind="stable").drop_duplicates("t")
    merged = pd.merge_asof(
        gps[["t", "speed_kmh"]],
        acc[["t", "z_kf", "y_kf"]],
        on="t",
        direction="nearest",
    )
    return merged.rename(columns={"z_kf": "a_long", "y_kf": "a_lat"})[["t", *RESPONSES]]


def find_trips(root) -> list[UAHTrip]:
    """Trip folders under ``root`` sorted by driver, road and behaviour."""
    trips = []
    for gps in sorted(Path(root).rglob("RAW_GPS.txt")):
        m = _FOLDER.search(gps.parent.name)
        if m:
            trips.append(UAHTrip(m.group(1).upper(), m.group(2).upper(), m.group(3).upper(), gps.parent))
    return sorted(trips, key=lambda x: (x.driver, x.road, x.behaviour, x.path.name))


def load_trip(trip: UAHTrip, trip_id, usage: str = "train") -> TripSeries:
    """Aligned responses cut into runs of moving, finite observations."""
    df = align(read_gps(trip.path / "RAW_GPS.txt"), read_accelerometers(trip.path / "RAW_ACCELEROMETERS.txt"))
    y = df[list(RESPONSES)].to_numpy(dtype=float)
    t = df["t"].to_numpy(dtype=float)
    valid = np.all(np.isfinite(y), axis=1)
    subs = []
    for start, end in candidate_runs(y[:, 0], valid):
        if end - start >= 2:
            subs.append(SubInterval(trip_id, len(subs), t[start:end], y[start:end], start, end, usage, trip.driver))
    duration = float(t[-1] - t[0]) if len(t) else 0.0
    return TripSeries(trip_id, trip.driver, duration, subs)
