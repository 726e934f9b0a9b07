"""Ground-truth CTHMM data with optional labelled contamination."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .model import CTHMM
from .prep import SubInterval, TripSeries

log = logging.getLogger(__name__)


@dataclass
class SimConfig:
    """Simulation settings.

    Gaps are Exponential(``gap_rate``) unless ``fixed_gap`` is set.  Lengths
    are uniform on ``n_obs +- n_obs_jitter``.  ``contamination`` maps a
    dimension index to ``(scale, shift)`` applied as ``y * scale + shift`` on
    every observation of a contaminated sub-interval.
    """

    model: CTHMM
    n_sub_intervals: int = 100
    n_obs: int = 100
    n_obs_jitter: int = 0
    gap_rate: float = 1.0
    fixed_gap: float | None = None
    subs_per_trip: int = 1
    n_drivers: int = 1
    contamination_fraction: float = 0.0
    contamination: dict = field(default_factory=lambda: {1: (3.0, 0.0)})
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.contamination_fraction <= 1:
            raise ValueError("contamination fraction must lie in [0, 1]")
        if self.fixed_gap is not None and self.fixed_gap <= 0:
            raise ValueError("gaps must be positive")
        if self.fixed_gap is None and self.gap_rate <= 0:
            raise ValueError("gap rate must be positive")
        if self.n_obs - self.n_obs_jitter < 1:
            raise ValueError("sub-intervals need at least one observation")


@dataclass
class LatentPath:
    jump_times: np.ndarray  # times at which the chain enters each state, first is 0
    states: np.ndarray  # state entered at each jump time

    def state_at(self, t) -> np.ndarray:
        idx = np.searchsorted(self.jump_times, t, side="right") - 1
        return self.states[idx]


@dataclass
class SimTruth:
    paths: list[LatentPath]
    observed_states: list[np.ndarray]
    contaminated: np.ndarray  # (n_sub_intervals,) bool

    def frame(self, subs) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "trip_id": [s.trip_id for s in subs],
                "sub_id": [s.sub_id for s in subs],
                "contaminated": self.contaminated.astype(int),
            }
        )


def simulate_path(Q, pi, horizon: float, rng: np.random.Generator) -> LatentPath:
    """Exponential sojourns with rate q_u and jump probabilities q_uv / q_u."""
    Q = np.asarray(Q, dtype=float)
    S = len(pi)
    u = int(rng.choice(S, p=pi))
    times, states = [0.0], [u]
    t = 0.0
    while True:
        rate = -Q[u, u]
        if rate <= 0:
            break
        t += rng.exponential(1.0 / rate)
        if t > horizon:
            break
        jump = np.clip(Q[u], 0.0, None)
        jump[u] = 0.0
        u = int(rng.choice(S, p=jump / rate))
        times.append(t)
        states.append(u)
    return LatentPath(np.array(times), np.array(states, dtype=np.int64))


def _reachable(Q, pi) -> np.ndarray:
    S = len(pi)
    seen = np.asarray(pi) > 0
    frontier = list(np.flatnonzero(seen))
    while frontier:
        u = frontier.pop()
        for v in range(S):
            if v != u and Q[u, v] > 0 and not seen[v]:
                seen[v] = True
                frontier.append(v)
    return seen


def simulate(config: SimConfig) -> tuple[list[SubInterval], SimTruth]:
    """Draw sub-intervals from ``config.model`` with snapshot emissions."""
    model = config.model
    Q = model.Q
    if not np.all(_reachable(Q, model.pi)):
        log.warning("generator has states that can never be visited")

    root = np.random.SeedSequence(config.seed)
    contam_seq, *sub_seqs = root.spawn(config.n_sub_intervals + 1)
    n_contam = int(round(config.contamination_fraction * config.n_sub_intervals))
    contaminated = np.zeros(config.n_sub_intervals, dtype=bool)
    if n_contam:
        pick = np.random.default_rng(contam_seq).choice(config.n_sub_intervals, n_contam, replace=False)
        contaminated[pick] = True

    subs, paths, observed = [], [], []
    for i, seq in enumerate(sub_seqs):
        rng = np.random.default_rng(seq)
        n = int(rng.integers(config.n_obs - config.n_obs_jitter, config.n_obs + config.n_obs_jitter + 1))
        if config.fixed_gap is not None:
            gaps = np.full(n - 1, config.fixed_gap)
        else:
            gaps = rng.exponential(1.0 / config.gap_rate, n - 1)
        t = np.concatenate([[0.0], np.cumsum(gaps)])
        path = simulate_path(Q, model.pi, t[-1], rng)
        z = path.state_at(t)
        y = np.empty((n, model.n_dims))
        for d in range(model.n_dims):
            for u in range(model.n_states):
                mask = z == u
                if mask.any():
                    y[mask, d] = model.emissions[u][d].sample(rng, int(mask.sum()))
        if contaminated[i]:
            for d, (scale, shift) in config.contamination.items():
                y[:, d] = y[:, d] * scale + shift
        trip = i // config.subs_per_trip
        subs.append(
            SubInterval(
                trip_id=trip,
                sub_id=i % config.subs_per_trip,
                t=t,
                y=y,
                start_index=0,
                end_index=n,
                usage="train",
                driver_id=trip % config.n_drivers,
            )
        )
        paths.append(path)
        observed.append(z)
    return subs, SimTruth(paths, observed, contaminated)


def group_trips(subs: list[SubInterval]) -> list[TripSeries]:
    """Collect simulated sub-intervals into trips, preserving order."""
    trips: dict = {}
    for s in subs:
        trip = trips.setdefault(s.trip_id, TripSeries(s.trip_id, s.driver_id, 0.0))
        trip.sub_intervals.append(s)
        trip.duration += float(s.t[-1] - s.t[0])
    return list(trips.values())
