"""Scaled forward-backward, Viterbi decoding and one-step predictive states.

All routines operate on batches of sub-intervals padded to a common length.
Padding steps use the identity transition and a unit emission, which leaves
the scaled forward and backward variables (and therefore every per-sequence
quantity) unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ctmc import DELTA_QUANTUM, CountTables, quantize_gaps, transition_matrices
from .model import CTHMM


class ZeroLikelihoodError(ValueError):
    """An observation has zero density under every state."""


@dataclass
class ForwardBackwardResult:
    log_likelihood: float
    smoothers: np.ndarray  # (T+1, S)
    two_slice: np.ndarray  # (T, S, S)
    scales: np.ndarray  # (T+1,) normalisers of the scaled forward pass
    predictive: np.ndarray  # (T+1, S); row l is P(Z_l | y_0..y_{l-1}), row 0 is pi


@dataclass
class ViterbiPath:
    states: np.ndarray  # 0-based labels, length T+1
    log_score: float


@dataclass
class _Batch:
    n_obs: np.ndarray  # (B,)
    gap_index: np.ndarray  # (B, L); index into P, padding -> identity slot
    P: np.ndarray  # (K+1, S, S), last slot is the identity
    deltas: np.ndarray  # (K,)
    log_f: np.ndarray  # (B, L, S) raw log densities, padding 0
    f: np.ndarray  # (B, L, S) densities rescaled by per-row max, padding 1
    log_m: np.ndarray  # (B, L) per-row max log density, padding 0
    excluded: np.ndarray  # (B, L) rows outside every state's support


def gap_cache(model: CTHMM, subs: Sequence):
    """Distinct gaps of ``subs`` and their transition matrices, for reuse across batches."""
    gaps = [np.diff(np.asarray(s.t, dtype=float)) for s in subs]
    deltas, _ = quantize_gaps(np.concatenate(gaps) if gaps else np.empty(0))
    return deltas, transition_matrices(model.Q, deltas)


def _lookup_gaps(deltas, gaps):
    keys = np.rint(np.asarray(deltas) / DELTA_QUANTUM).astype(np.int64)
    want = np.rint(gaps / DELTA_QUANTUM).astype(np.int64)
    idx = np.searchsorted(keys, want)
    if len(want) and (np.any(idx >= len(keys)) or np.any(keys[np.minimum(idx, len(keys) - 1)] != want)):
        raise KeyError("gap cache does not cover every gap")
    return idx


def _label(sub, b):
    tid = getattr(sub, "trip_id", None)
    sid = getattr(sub, "sub_id", None)
    return f"sequence {b}" if tid is None else f"trip {tid!r} sub-interval {sid!r}"


def _prepare(model: CTHMM, subs: Sequence, P_cache=None, allow_excluded: bool = False) -> _Batch:
    S = model.n_states
    B = len(subs)
    n_obs = np.array([len(s.t) for s in subs])
    if np.any(n_obs < 1):
        raise ValueError("every sub-interval needs at least one observation")
    L = int(n_obs.max())
    gaps = [np.diff(np.asarray(s.t, dtype=float)) for s in subs]
    all_gaps = np.concatenate(gaps) if gaps else np.empty(0)
    if np.any(all_gaps <= 0):
        raise ValueError("observation times must be strictly increasing")
    if P_cache is not None:
        deltas, Pk = P_cache
        inv = _lookup_gaps(deltas, all_gaps)
    else:
        deltas, inv = quantize_gaps(all_gaps)
        Pk = transition_matrices(model.Q, deltas)
    K = len(deltas)
    P = np.concatenate([Pk, np.eye(S)[None]], axis=0)

    gap_index = np.full((B, L), K, dtype=np.int64)
    log_f = np.zeros((B, L, S))
    excluded = np.zeros((B, L), dtype=bool)
    pos = 0
    for b, s in enumerate(subs):
        n = n_obs[b]
        gap_index[b, 1:n] = inv[pos : pos + n - 1]
        pos += n - 1
        lf = model.log_emissions(s.y)
        bad = ~np.isfinite(lf.max(axis=1))
        if allow_excluded:
            # unsupported observations carry no information about the state
            lf[bad] = 0.0
            excluded[b, :n] = bad
        elif np.any(bad):
            l = int(np.argmax(bad))
            raise ZeroLikelihoodError(
                f"{_label(s, b)}: observation {l} at t={s.t[l]!r} has zero density under every state"
            )
        log_f[b, :n] = lf
    log_m = log_f.max(axis=2)
    f = np.exp(log_f - log_m[:, :, None])
    return _Batch(n_obs, gap_index, P, deltas, log_f, f, log_m, excluded)


def _forward(model: CTHMM, batch: _Batch, subs):
    B, L, S = batch.f.shape
    alpha = np.empty((B, L, S))
    pred = np.empty((B, L, S))
    c = np.ones((B, L))
    pred[:, 0] = model.pi
    a = model.pi[None, :] * batch.f[:, 0]
    for l in range(L):
        if l > 0:
            w = np.einsum("bu,buv->bv", alpha[:, l - 1], batch.P[batch.gap_index[:, l]])
            pred[:, l] = w / w.sum(axis=1, keepdims=True)
            a = w * batch.f[:, l]
        cl = a.sum(axis=1)
        if np.any(cl <= 0):
            b = int(np.argmax(cl <= 0))
            raise ZeroLikelihoodError(
                f"{_label(subs[b], b)}: zero likelihood at observation {l}"
            )
        c[:, l] = cl
        alpha[:, l] = a / cl[:, None]
    loglik = np.log(c).sum(axis=1) + batch.log_m.sum(axis=1)
    return alpha, pred, c, loglik


def forward_backward_batch(model: CTHMM, subs: Sequence, keep_two_slice: bool = True, P_cache=None):
    """Run the scaled forward-backward recursions on many sub-intervals.

    Returns ``(results, tables)`` where ``results`` holds one
    ``ForwardBackwardResult`` per sub-interval (``two_slice`` is ``None`` when
    ``keep_two_slice`` is false) and ``tables`` accumulates every two-slice
    marginal into count tables keyed by gap.
    """
    batch = _prepare(model, subs, P_cache)
    B, L, S = batch.f.shape
    alpha, pred, c, loglik = _forward(model, batch, subs)

    beta = np.ones((B, L, S))
    K = len(batch.deltas)
    counts = np.zeros((K + 1, S, S))
    xi = np.zeros((B, max(L - 1, 0), S, S)) if keep_two_slice else None
    for l in range(L - 2, -1, -1):
        Pn = batch.P[batch.gap_index[:, l + 1]]
        fb = batch.f[:, l + 1] * beta[:, l + 1]
        beta[:, l] = np.einsum("buv,bv->bu", Pn, fb) / c[:, l + 1, None]
        x = alpha[:, l, :, None] * Pn * (fb / c[:, l + 1, None])[:, None, :]
        np.add.at(counts, batch.gap_index[:, l + 1], x)
        if keep_two_slice:
            xi[:, l] = x

    gamma = alpha * beta
    results = []
    for b in range(B):
        n = batch.n_obs[b]
        results.append(
            ForwardBackwardResult(
                log_likelihood=float(loglik[b]),
                smoothers=gamma[b, :n],
                two_slice=xi[b, : n - 1] if keep_two_slice else None,
                scales=c[b, :n],
                predictive=pred[b, :n],
            )
        )
    return results, CountTables(batch.deltas, counts[:K])


def forward_backward(model: CTHMM, sub) -> ForwardBackwardResult:
    """Smoothers, two-slice marginals and log-likelihood of one sub-interval."""
    results, _ = forward_backward_batch(model, [sub])
    return results[0]


def log_likelihood(model: CTHMM, subs: Sequence) -> float:
    """Total log-likelihood; sub-intervals are independent."""
    batch = _prepare(model, subs)
    return float(_forward(model, batch, subs)[3].sum())


def predictive_states(model: CTHMM, sub) -> np.ndarray:
    """One-step-ahead state distributions; row ``l`` is P(Z_l | y_0..y_{l-1})."""
    batch = _prepare(model, [sub])
    return _forward(model, batch, [sub])[1][0, : len(sub.t)]


def predictive_batch(model: CTHMM, subs: Sequence):
    """Predictive state distributions for many sub-intervals.

    Observations with zero density under every state are treated as missing
    and reported in the returned exclusion masks.
    Returns a list of ``(predictive, excluded)`` pairs.
    """
    out = []
    if not subs:
        return out
    cache = gap_cache(model, subs)
    order = sorted(range(len(subs)), key=lambda i: (len(subs[i].t), i))
    results = [None] * len(subs)
    for start in range(0, len(order), 256):
        idx = order[start : start + 256]
        chunk = [subs[i] for i in idx]
        batch = _prepare(model, chunk, cache, allow_excluded=True)
        pred = _forward(model, batch, chunk)[1]
        for j, i in enumerate(idx):
            n = batch.n_obs[j]
            results[i] = (pred[j, :n], batch.excluded[j, :n])
    return results


def predictive_state(model: CTHMM, sub, l: int) -> np.ndarray:
    if not 1 <= l < len(sub.t):
        raise IndexError("step index must satisfy 1 <= l <= T")
    return predictive_states(model, sub)[l]


def viterbi_batch(model: CTHMM, subs: Sequence, P_cache=None) -> list[ViterbiPath]:
    batch = _prepare(model, subs, P_cache)
    B, L, S = batch.f.shape
    with np.errstate(divide="ignore"):
        logP = np.log(batch.P)
        delta = np.log(model.pi)[None, :] + batch.log_f[:, 0]
    back = np.zeros((B, L, S), dtype=np.int64)
    back[:, 0] = np.arange(S)
    for l in range(1, L):
        cand = delta[:, :, None] + logP[batch.gap_index[:, l]]
        # argmax takes the first maximum, i.e. the lower state index on ties
        back[:, l] = np.argmax(cand, axis=1)
        delta = np.take_along_axis(cand, back[:, l][:, None, :], axis=1)[:, 0] + batch.log_f[:, l]
    paths = []
    for b in range(B):
        n = batch.n_obs[b]
        states = np.empty(n, dtype=np.int64)
        states[-1] = int(np.argmax(delta[b]))
        for l in range(n - 1, 0, -1):
            states[l - 1] = back[b, l, states[l]]
        paths.append(ViterbiPath(states, float(delta[b].max())))
    return paths


def viterbi(model: CTHMM, sub) -> ViterbiPath:
    """Most likely latent state sequence (0-based labels)."""
    return viterbi_batch(model, [sub])[0]


def path_log_density(model: CTHMM, sub, states) -> float:
    """Joint log density of observations and a given state path."""
    states = np.asarray(states)
    lf = model.log_emissions(sub.y)
    with np.errstate(divide="ignore"):
        out = np.log(model.pi[states[0]]) + lf[0, states[0]]
        gaps = np.diff(np.asarray(sub.t, dtype=float))
        if len(gaps):
            P = transition_matrices(model.Q, gaps)
            out += np.log(P[np.arange(len(gaps)), states[:-1], states[1:]]).sum()
            out += lf[np.arange(1, len(states)), states[1:]].sum()
    return float(out)
