"""Rate-matrix algebra for the latent continuous-time chain.

``transition_matrix`` gives P(t) = exp(Qt).  ``expm_integrals`` turns
accumulated two-slice expectations (count tables keyed by distinct
inter-observation gaps) into expected sojourn times and expected transition
counts via integrals of matrix exponentials.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

log = logging.getLogger(__name__)

DELTA_QUANTUM = 1e-6
P_GUARD = 1e-300


def validate_rate_matrix(Q, atol: float = 1e-9) -> np.ndarray:
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ValueError("rate matrix must be square")
    if not np.all(np.isfinite(Q)):
        raise ValueError("rate matrix has non-finite entries")
    off = Q - np.diag(np.diag(Q))
    if np.any(off < 0):
        raise ValueError("off-diagonal rates must be non-negative")
    if np.any(np.abs(Q.sum(axis=1)) > atol * max(1.0, np.abs(Q).max())):
        raise ValueError("rate matrix rows must sum to zero")
    return Q


def rate_matrix(offdiag) -> np.ndarray:
    """Build a generator from off-diagonal rates (diagonal of input ignored)."""
    Q = np.array(offdiag, dtype=float)
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return Q


def _stochastic(P: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(P)):
        raise FloatingPointError("matrix exponential produced non-finite entries")
    P = np.where((P < 0) & (P >= -1e-12), 0.0, P)
    return P / P.sum(axis=-1, keepdims=True)


def transition_matrix(Q, t: float) -> np.ndarray:
    """P(t) = exp(Q t), clipped and row-renormalised."""
    if t < 0:
        raise ValueError("t must be non-negative")
    return _stochastic(expm(np.asarray(Q, dtype=float) * t))


def transition_matrices(Q, deltas) -> np.ndarray:
    """Stack of P(delta) for every entry of ``deltas``; shape (K, S, S)."""
    deltas = np.asarray(deltas, dtype=float)
    if np.any(deltas < 0):
        raise ValueError("gaps must be non-negative")
    Q = np.asarray(Q, dtype=float)
    if deltas.size == 0:
        return np.empty((0,) + Q.shape)
    return _stochastic(expm(deltas[:, None, None] * Q))


def quantize_gaps(deltas) -> tuple[np.ndarray, np.ndarray]:
    """Group gaps by value on a 1e-6 s grid.

    Returns one representative gap per group (its first occurrence, so
    distinct gaps stay exact), ascending, and for each input gap the index of
    its group.
    """
    deltas = np.asarray(deltas, dtype=float)
    keys = np.rint(deltas / DELTA_QUANTUM).astype(np.int64)
    _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    return deltas[first], inverse.reshape(-1)


@dataclass
class CountTables:
    """Two-slice expectations accumulated per distinct gap.

    ``counts[k]`` is the S x S table for gap ``deltas[k]``.
    """

    deltas: np.ndarray
    counts: np.ndarray

    @classmethod
    def empty(cls, S: int) -> "CountTables":
        return cls(np.empty(0), np.empty((0, S, S)))

    @classmethod
    def from_pairs(cls, deltas, two_slice) -> "CountTables":
        """Accumulate per-step two-slice matrices (T, S, S) keyed by their gap."""
        two_slice = np.asarray(two_slice, dtype=float)
        uniq, inv = quantize_gaps(deltas)
        counts = np.zeros((len(uniq),) + two_slice.shape[1:])
        np.add.at(counts, inv, two_slice)
        return cls(uniq, counts)

    def merge(self, other: "CountTables") -> "CountTables":
        if len(other.deltas) == 0:
            return self
        if len(self.deltas) == 0:
            return other
        deltas = np.concatenate([self.deltas, other.deltas])
        uniq, inv = quantize_gaps(deltas)
        counts = np.zeros((len(uniq),) + self.counts.shape[1:])
        np.add.at(counts, inv, np.concatenate([self.counts, other.counts]))
        return CountTables(uniq, counts)


@dataclass
class IntegralResult:
    E_tau: np.ndarray
    E_n: np.ndarray
    skipped: int = 0


def _weights(C: np.ndarray, P: np.ndarray) -> tuple[np.ndarray, int]:
    """C / P elementwise, skipping pairs whose P entry underflows."""
    bad = (C > 0) & (P < P_GUARD)
    with np.errstate(divide="ignore", invalid="ignore"):
        W = np.where((C > 0) & ~bad, C / np.where(P < P_GUARD, 1.0, P), 0.0)
    return W, int(bad.sum())


def expm_integrals_blockwise(Q, tables: CountTables) -> IntegralResult:
    """Reference implementation: one block exponential per (state pair, gap).

    For each u (and u, v) builds A = [[Q, I(u, v)], [0, Q]], takes the upper
    right S x S block of exp(gap * A) and weights it by C / P(gap).
    """
    Q = validate_rate_matrix(Q)
    S = Q.shape[0]
    E_tau = np.zeros(S)
    E_n = np.zeros((S, S))
    order = np.argsort(tables.deltas, kind="stable")
    skipped = 0
    for k in order:
        delta, C = tables.deltas[k], tables.counts[k]
        W, bad = _weights(C, transition_matrix(Q, delta))
        skipped += bad
        for u in range(S):
            for v in range(S):
                if u != v and Q[u, v] == 0:
                    continue
                A = np.zeros((2 * S, 2 * S))
                A[:S, :S] = Q
                A[S:, S:] = Q
                A[u, S + v] = 1.0
                D = expm(delta * A)[:S, S:]
                if u == v:
                    E_tau[u] += np.sum(W * D)
                else:
                    E_n[u, v] += Q[u, v] * np.sum(W * D)
    if skipped:
        log.warning("expm integrals: skipped %d pairs with vanishing transition probability", skipped)
    return IntegralResult(E_tau, E_n, skipped)


def expm_integrals(Q, tables: CountTables, P=None) -> IntegralResult:
    """Expected sojourn times and transition counts from count tables.

    Computes the same sums as ``expm_integrals_blockwise`` using one 2S x 2S
    exponential per gap: with W = C / P(gap), the upper right block of
    exp(gap * [[Q^T, W], [0, Q^T]]) is the matrix M with
    M[u, v] = sum_{u', v'} W[u', v'] * int_0^gap P(s)[u', u] P(gap - s)[v, v'] ds,
    so E_tau[u] accumulates M[u, u] and E_n[u, v] accumulates q_uv * M[u, v].

    Parameters
    ----------
    Q : (S, S) array
    tables : CountTables
    P : (K, S, S) array, optional
        Precomputed P(gap) aligned with ``tables.deltas``.
    """
    Q = validate_rate_matrix(Q)
    S = Q.shape[0]
    K = len(tables.deltas)
    if K == 0:
        return IntegralResult(np.zeros(S), np.zeros((S, S)))
    if P is None:
        P = transition_matrices(Q, tables.deltas)
    W, skipped = _weights(tables.counts, P)
    A = np.zeros((K, 2 * S, 2 * S))
    QT = Q.T * tables.deltas[:, None, None]
    A[:, :S, :S] = QT
    A[:, S:, S:] = QT
    A[:, :S, S:] = W * tables.deltas[:, None, None]
    M = expm(A)[:, :S, S:]
    order = np.argsort(tables.deltas, kind="stable")
    Msum = M[order].sum(axis=0)
    E_tau = np.clip(np.diag(Msum).copy(), 0.0, None)
    E_n = np.clip(Q * Msum, 0.0, None)
    np.fill_diagonal(E_n, 0.0)
    if skipped:
        log.warning("expm integrals: skipped %d pairs with vanishing transition probability", skipped)
    return IntegralResult(E_tau, E_n, skipped)
