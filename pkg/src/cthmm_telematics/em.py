"""Expectation-maximisation for individual-specific and pooled CTHMMs."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .ctmc import DELTA_QUANTUM, CountTables, expm_integrals
from .distributions import FAMILIES, weighted_mle
from .inference import forward_backward_batch, gap_cache, log_likelihood, viterbi_batch
from .model import DEFAULT_DIMS, CTHMM

log = logging.getLogger(__name__)

RESP_FLOOR = 1e-12
_BATCH_CELLS = 2_000_000

POSITIVE_SUPPORT = {"gamma", "lognormal"}
NONNEGATIVE_SUPPORT = {"zigamma", "zilognormal"}


@dataclass
class FitConfig:
    n_states: int
    families: tuple[str, ...] = ("gamma", "normal", "normal")
    decoding: str = "soft"
    max_iters: int = 5000
    rel_tol: float = 1e-8
    restarts: int = 1
    seed: int = 0
    kmeans_iters: int = 50
    dims: tuple[str, ...] = DEFAULT_DIMS

    def __post_init__(self):
        if self.n_states < 1:
            raise ValueError("n_states must be at least 1")
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be positive")
        if self.decoding not in ("soft", "hard"):
            raise ValueError("decoding must be 'soft' or 'hard'")
        unknown = [f for f in self.families if f not in FAMILIES]
        if unknown:
            raise ValueError(f"unknown families: {unknown}")
        self.families = tuple(self.families)
        if len(self.dims) != len(self.families):
            self.dims = tuple(f"y{d}" for d in range(len(self.families)))


@dataclass
class SufficientStats:
    initial: np.ndarray  # (S,) expected initial-state counts
    tables: CountTables
    E_tau: np.ndarray
    E_n: np.ndarray
    responsibilities: np.ndarray  # (N_obs, S), rows in data order
    log_likelihood: float
    skipped_pairs: int = 0


class NoTrainingDataError(ValueError):
    pass


def _sort_key(sub):
    return (str(getattr(sub, "driver_id", "")), str(sub.trip_id), sub.sub_id)


def _chunks(data: Sequence, S: int):
    """Index groups of similar length bounded in padded size."""
    order = sorted(range(len(data)), key=lambda i: (len(data[i].t), i))
    group, longest = [], 0
    for i in order:
        n = len(data[i].t)
        if group and (len(group) + 1) * max(longest, n) * S > _BATCH_CELLS:
            yield group
            group, longest = [], 0
        group.append(i)
        longest = max(longest, n)
    if group:
        yield group


def e_step(model: CTHMM, data: Sequence, decoding: str = "soft") -> SufficientStats:
    """Expected sufficient statistics of the complete-data log-likelihood."""
    if not data:
        raise NoTrainingDataError("no sub-intervals to process")
    S = model.n_states
    cache = gap_cache(model, data)
    deltas, P = cache
    counts = np.zeros((len(deltas), S, S))
    initial = np.zeros(S)
    offsets = np.concatenate([[0], np.cumsum([len(s.t) for s in data])])
    resp = np.zeros((offsets[-1], S))
    total_ll = 0.0

    for idx in _chunks(data, S):
        subs = [data[i] for i in idx]
        if decoding == "soft":
            results, tables = forward_backward_batch(model, subs, keep_two_slice=False, P_cache=cache)
            counts += tables.counts
            for i, res in zip(idx, results):
                resp[offsets[i] : offsets[i + 1]] = res.smoothers
                initial += res.smoothers[0]
                total_ll += res.log_likelihood
        else:
            paths = viterbi_batch(model, subs, P_cache=cache)
            for i, sub, path in zip(idx, subs, paths):
                z = path.states
                resp[offsets[i] + np.arange(len(z)), z] = 1.0
                initial[z[0]] += 1.0
                total_ll += path.log_score
                if len(z) > 1:
                    key = np.rint(np.diff(sub.t) / DELTA_QUANTUM).astype(np.int64)
                    k = np.searchsorted(np.rint(deltas / DELTA_QUANTUM).astype(np.int64), key)
                    np.add.at(counts, (k, z[:-1], z[1:]), 1.0)

    tables = CountTables(deltas, counts)
    integrals = expm_integrals(model.Q, tables, P=P)
    return SufficientStats(
        initial, tables, integrals.E_tau, integrals.E_n, resp, total_ll, integrals.skipped
    )


def _stack(data: Sequence) -> np.ndarray:
    return np.concatenate([np.asarray(s.y, dtype=float) for s in data], axis=0)


def m_step(stats: SufficientStats, data: Sequence, config: FitConfig, previous: CTHMM, Y=None) -> CTHMM:
    """Closed-form updates of pi and Q; weighted MLE for each emission."""
    S = previous.n_states
    Y = _stack(data) if Y is None else Y
    pi = stats.initial / stats.initial.sum()

    Q = np.zeros((S, S))
    unreachable = []
    for u in range(S):
        if stats.E_tau[u] > 0:
            Q[u] = stats.E_n[u] / stats.E_tau[u]
            Q[u, u] = 0.0
        else:
            unreachable.append(u)
    np.fill_diagonal(Q, -Q.sum(axis=1))

    resp = np.where(stats.responsibilities < RESP_FLOOR, 0.0, stats.responsibilities)
    emissions = []
    degenerate = []
    for u in range(S):
        row = []
        for d, tag in enumerate(config.families):
            if u in unreachable:
                fam, bad = previous.emissions[u][d], False
            else:
                fam, bad = weighted_mle(tag, Y[:, d], resp[:, u], previous.emissions[u][d])
            if bad:
                degenerate.append([u, d])
            row.append(fam)
        emissions.append(row)
    model = CTHMM(pi, Q, emissions, previous.dims)
    model.diagnostics = {"degenerate": degenerate, "unreachable": unreachable}
    return model


def q_function(model: CTHMM, stats: SufficientStats, data: Sequence, Y=None) -> float:
    """Expected complete-data log-likelihood of ``model`` under ``stats``."""
    Y = _stack(data) if Y is None else Y
    with np.errstate(divide="ignore", invalid="ignore"):
        q_pi = np.sum(np.where(stats.initial > 0, stats.initial * np.log(model.pi), 0.0))
        off = ~np.eye(model.n_states, dtype=bool)
        q_Q = np.sum(np.where(off & (stats.E_n > 0), stats.E_n * np.log(model.Q), 0.0))
        q_Q -= np.sum(-np.diag(model.Q) * stats.E_tau)
        lf = model.log_emissions(Y)
        q_theta = np.sum(np.where(stats.responsibilities > 0, stats.responsibilities * lf, 0.0))
    return float(q_pi + q_Q + q_theta)


# --- initialisation ------------------------------------------------------------


def _lloyd(X: np.ndarray, k: int, rng: np.random.Generator, iters: int):
    n = len(X)
    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[rng.integers(n)]
    d2 = np.sum((X - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centroids[j] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centroids[j]) ** 2, axis=1))

    labels = np.full(n, -1)
    for _ in range(iters):
        dist = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(dist, axis=1)
        for j in range(k):
            if not np.any(new == j):
                far = int(np.argmax(dist[np.arange(n), new]))
                new[far] = j
                dist[far, j] = 0.0
        if np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            centroids[j] = X[labels == j].mean(axis=0)
    inertia = float(np.sum((X - centroids[labels]) ** 2))
    return centroids, labels, inertia


def kmeans(X: np.ndarray, k: int, rng: np.random.Generator, iters: int = 50, n_init: int = 10):
    """Lloyd's algorithm with k-means++ seeding, best of ``n_init`` seedings.

    Empty clusters are reseeded at the point farthest from its centroid.
    Returns ``(centroids, labels)`` of the run with the lowest inertia.
    """
    if len(X) < k:
        raise ValueError(f"need at least {k} observations for {k} clusters")
    best = None
    for _ in range(n_init):
        run = _lloyd(X, k, rng, iters)
        if best is None or run[2] < best[2]:
            best = run
    return best[0], best[1]


def initialize(data: Sequence, config: FitConfig, rng: np.random.Generator, Y=None) -> CTHMM:
    """k-means emissions, flat Dirichlet pi and Uniform(0.05, 0.5) rates."""
    S = config.n_states
    Y = _stack(data) if Y is None else Y
    sd = Y.std(axis=0)
    Z = (Y - Y.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    _, labels = kmeans(Z, S, rng, config.kmeans_iters)
    emissions = []
    for u in range(S):
        members = Y[labels == u]
        emissions.append(
            [weighted_mle(tag, members[:, d], np.ones(len(members)))[0] for d, tag in enumerate(config.families)]
        )
    pi = rng.dirichlet(np.ones(S))
    off = rng.uniform(0.05, 0.5, size=(S, S))
    np.fill_diagonal(off, 0.0)
    Q = off - np.diag(off.sum(axis=1))
    return CTHMM(pi, Q, emissions, config.dims)


def validate_support(data: Sequence, families: Sequence[str]):
    Y = _stack(data)
    if Y.shape[1] != len(families):
        raise ValueError(f"data has {Y.shape[1]} dimensions but {len(families)} families were given")
    if not np.all(np.isfinite(Y)):
        raise ValueError("training data contains missing or non-finite values")
    for d, tag in enumerate(families):
        if tag in POSITIVE_SUPPORT and np.any(Y[:, d] <= 0):
            raise ValueError(f"dimension {d} has non-positive values outside the {tag} support")
        if tag in NONNEGATIVE_SUPPORT and np.any(Y[:, d] < 0):
            raise ValueError(f"dimension {d} has negative values outside the {tag} support")
        if tag == "vonmises" and np.any((Y[:, d] < -np.pi) | (Y[:, d] >= np.pi)):
            raise ValueError(f"dimension {d} has angles outside [-pi, pi)")


def information_criteria(loglik: float, n_params: int, n_obs: int) -> tuple[float, float]:
    return 2 * n_params - 2 * loglik, n_params * math.log(n_obs) - 2 * loglik


@dataclass
class _Run:
    model: CTHMM
    trace: list[float] = field(default_factory=list)
    converged: bool = False


def _run_em(data, config, rng, Y, callback, init=None) -> _Run:
    model = initialize(data, config, rng, Y) if init is None else init
    run = _Run(model)
    for it in range(config.max_iters):
        stats = e_step(model, data, config.decoding)
        ll = stats.log_likelihood
        run.trace.append(ll)
        if callback is not None:
            callback(it, ll)
        if it > 0 and abs(ll - run.trace[-2]) <= config.rel_tol * abs(run.trace[-2]):
            run.converged = True
            break
        model = m_step(stats, data, config, model, Y)
        run.model = model
    return run


def fit(
    data: Sequence,
    config: FitConfig,
    callback: Callable[[int, float], None] | None = None,
    init: CTHMM | None = None,
) -> CTHMM:
    """Fit a CTHMM to independent sub-intervals by EM.

    Sub-intervals are processed in (driver, trip, sub-interval) order.  Each
    restart ``r`` draws its initialisation from ``default_rng([seed, r])``; the
    restart with the highest final log-likelihood wins, the earliest on ties.
    ``init`` bypasses the random initialisation (single run).
    """
    data = sorted(data, key=_sort_key)
    if not data:
        raise NoTrainingDataError("no valid training sub-intervals")
    validate_support(data, config.families)
    Y = _stack(data)

    best = None
    restart_ll = []
    for r in range(1 if init is not None else config.restarts):
        rng = np.random.default_rng([config.seed, r])
        run = _run_em(data, config, rng, Y, callback, init)
        final_ll = log_likelihood(run.model, data)
        restart_ll.append(final_ll)
        if best is None or final_ll > best[1]:
            best = (run, final_ll)

    run, ll = best
    model = run.model
    n_params = model.n_params()
    aic, bic = information_criteria(ll, n_params, len(Y))
    model.diagnostics = {
        "log_likelihood": ll,
        "iterations": len(run.trace),
        "converged": run.converged,
        "decoding": config.decoding,
        "aic": aic,
        "bic": bic,
        "n_params": n_params,
        "n_obs": int(len(Y)),
        "n_sequences": len(data),
        "seed": config.seed,
        "restart_log_likelihoods": restart_ll,
        "degenerate": model.diagnostics.get("degenerate", []),
        "unreachable": model.diagnostics.get("unreachable", []),
        "trace": run.trace,
    }
    return model


def fit_pooled(drivers: Mapping[object, Sequence], config: FitConfig, callback=None) -> CTHMM:
    """One model across drivers; with a single driver this is the individual fit."""
    data = []
    for driver in sorted(drivers, key=str):
        for sub in drivers[driver]:
            if getattr(sub, "driver_id", None) is None:
                sub = dataclasses.replace(sub, driver_id=driver)
            data.append(sub)
    return fit(data, config, callback)
