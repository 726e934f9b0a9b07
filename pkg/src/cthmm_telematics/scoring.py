"""Logistic risk scoring: IRLS fits, ROC-AUC, grouped cross-validation, window metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import linalg, stats
from scipy.special import expit, log_expit

from .anomaly import TAIL_COLUMNS

log = logging.getLogger(__name__)

MAX_ITERS = 100
SUMMARY_COLUMNS = ["term", "estimate", "std_error", "z_value", "p_value"]


class DesignError(ValueError):
    """The design cannot be fitted or scored."""


@dataclass
class LogisticFit:
    names: list[str]
    coef: np.ndarray  # intercept first when fitted with one
    std_error: np.ndarray
    log_likelihood: float
    iterations: int
    converged: bool
    separated: bool
    gradient_norm: float
    intercept: bool = True

    def linear_predictor(self, X, offset=None) -> np.ndarray:
        X = _design_matrix(X, self.intercept)
        eta = X @ self.coef
        return eta if offset is None else eta + np.asarray(offset, dtype=float)

    def predict(self, X, offset=None) -> np.ndarray:
        return expit(self.linear_predictor(X, offset))

    def summary(self) -> pd.DataFrame:
        with np.errstate(divide="ignore", invalid="ignore"):
            z = self.coef / self.std_error
        return pd.DataFrame(
            {
                "term": self.names,
                "estimate": self.coef,
                "std_error": self.std_error,
                "z_value": z,
                "p_value": 2 * stats.norm.sf(np.abs(z)),
            },
            columns=SUMMARY_COLUMNS,
        )


def _design_matrix(X, intercept: bool) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if intercept:
        X = np.column_stack([np.ones(len(X)), X])
    return X


def _loglik(X, y, beta, offset) -> float:
    eta = X @ beta + offset
    return float(np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta)))


def fit_logistic(X, y, offset=None, intercept: bool = True, names: Sequence[str] | None = None) -> LogisticFit:
    """Maximum-likelihood logistic regression by IRLS with step halving.

    ``offset`` enters the linear predictor with its coefficient fixed at 1.
    Standard errors come from the inverse information matrix at the solution.
    """
    raw = np.asarray(X, dtype=float)
    n_cov = 0 if raw.size == 0 else (1 if raw.ndim == 1 else raw.shape[1])
    y = np.asarray(y, dtype=float)
    Xd = _design_matrix(raw.reshape(len(y), n_cov), intercept)
    offset = np.zeros(len(y)) if offset is None else np.asarray(offset, dtype=float)
    if not (np.all(np.isfinite(Xd)) and np.all(np.isfinite(offset))):
        raise DesignError("covariates and offset must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise DesignError("labels must be 0 or 1")
    if y.min() == y.max():
        raise DesignError("need at least one positive and one negative label")
    if names is None:
        names = [f"x{j + 1}" for j in range(n_cov)]
    names = (["(Intercept)"] if intercept else []) + list(names)

    n, p = Xd.shape
    beta = np.zeros(p)
    ll = _loglik(Xd, y, beta, offset)
    converged = False
    it = 0
    for it in range(1, MAX_ITERS + 1):
        mu = expit(Xd @ beta + offset)
        grad = Xd.T @ (y - mu)
        info = Xd.T @ (Xd * (mu * (1 - mu))[:, None])
        try:
            step = linalg.solve(info, grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = linalg.lstsq(info, grad)[0]
        new_ll = _loglik(Xd, y, beta + step, offset)
        halvings = 0
        while new_ll < ll - 1e-12 * abs(ll) and halvings < 30:
            step /= 2
            new_ll = _loglik(Xd, y, beta + step, offset)
            halvings += 1
        beta = beta + step
        change = abs(new_ll - ll)
        ll = new_ll
        if np.max(np.abs(step)) < 1e-10 or change < 1e-14 * (abs(ll) + 1):
            converged = True
            break

    mu = expit(Xd @ beta + offset)
    grad = Xd.T @ (y - mu)
    info = Xd.T @ (Xd * (mu * (1 - mu))[:, None])
    try:
        cov = linalg.inv(info)
        se = np.sqrt(np.clip(np.diag(cov), 0, None))
    except (linalg.LinAlgError, ValueError):
        se = np.full(p, np.nan)
    eta = Xd @ beta + offset
    separated = (not converged) or bool(np.max(np.abs(eta)) > 30)
    if separated:
        log.warning("logistic fit looks separated; coefficients may diverge")
    return LogisticFit(
        names=names,
        coef=beta,
        std_error=se,
        log_likelihood=ll,
        iterations=it,
        converged=converged,
        separated=separated,
        gradient_norm=float(np.linalg.norm(grad) / n),
        intercept=intercept,
    )


def roc_auc(scores, labels) -> float:
    """Mann-Whitney probability that a positive outscores a negative; ties count half."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DesignError("ROC-AUC needs both classes")
    ranks = stats.rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def assign_folds(labels, groups, k: int, seed: int = 0) -> dict:
    """Greedy bin packing of groups into ``k`` folds balancing positives.

    Groups are put in canonical order, shuffled by ``seed`` and placed,
    largest positive count first, into the currently lightest fold.
    """
    frame = pd.DataFrame({"g": list(groups), "y": np.asarray(labels, dtype=int)})
    per = frame.groupby("g", sort=True)["y"].agg(["sum", "size"])
    if k < 1 or k > len(per):
        raise DesignError(f"k={k} must lie between 1 and the number of groups ({len(per)})")
    order = np.random.default_rng(seed).permutation(len(per))
    per = per.iloc[order]
    per = per.sort_values(["sum", "size"], ascending=False, kind="stable")
    pos = np.zeros(k, dtype=int)
    tot = np.zeros(k, dtype=int)
    fold_of = {}
    for g, (n_pos, n_tot) in per.iterrows():
        keys = list(zip(pos, tot)) if n_pos > 0 else list(zip(tot, pos))
        f = min(range(k), key=lambda i: (keys[i], i))
        fold_of[g] = f
        pos[f] += n_pos
        tot[f] += n_tot
    return fold_of


@dataclass
class CVResult:
    mean_auc: float
    fold_aucs: list[float]
    fold_of_group: dict
    skipped: list[int] = field(default_factory=list)
    positive_rates: list[float] = field(default_factory=list)


def cross_validate(X, y, groups=None, offset=None, k: int = 5, seed: int = 0) -> CVResult:
    """Grouped, label-stratified k-fold ROC-AUC of the logistic GLM."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=int)
    groups = np.arange(len(y)) if groups is None else np.asarray(groups)
    offset = np.zeros(len(y)) if offset is None else np.asarray(offset, dtype=float)
    fold_of = assign_folds(y, groups, k, seed)
    fold = np.array([fold_of[g] for g in groups])
    # canonical row order so results do not depend on how rows were supplied
    key = np.lexsort((np.arange(len(y)), np.unique(groups, return_inverse=True)[1]))
    aucs, skipped, rates = [], [], []
    for f in range(k):
        test = key[fold[key] == f]
        train = key[fold[key] != f]
        rates.append(float(y[test].mean()) if len(test) else float("nan"))
        if len(np.unique(y[test])) < 2 or len(np.unique(y[train])) < 2:
            log.warning("fold %d has a single class and is skipped", f)
            skipped.append(f)
            continue
        fit = fit_logistic(X[train], y[train], offset[train])
        aucs.append(roc_auc(fit.linear_predictor(X[test], offset[test]), y[test]))
    if not aucs:
        raise DesignError("every fold was skipped")
    return CVResult(float(np.mean(aucs)), aucs, fold_of, skipped, rates)


@dataclass
class WindowMetrics:
    mean_auc: float
    median_auc: float
    accuracy: float
    window_aucs: dict
    excluded: list


def window_metrics(scores, labels, windows) -> WindowMetrics:
    """Rank each window's single positive trip against the rest of the window.

    Accuracy is the share of windows where the positive strictly outranks
    every other trip.
    """
    frame = pd.DataFrame({"s": np.asarray(scores, dtype=float), "y": np.asarray(labels, dtype=int), "w": list(windows)})
    aucs, excluded = {}, []
    for w, grp in frame.groupby("w", sort=True):
        n_pos = int(grp["y"].sum())
        if n_pos != 1 or len(grp) < 2:
            log.warning("window %r has %d positive(s) among %d trips and is excluded", w, n_pos, len(grp))
            excluded.append(w)
            continue
        aucs[w] = roc_auc(grp["s"], grp["y"])
    if not aucs:
        raise DesignError("no usable windows")
    vals = np.array(list(aucs.values()))
    return WindowMetrics(float(vals.mean()), float(np.median(vals)), float(np.mean(vals == 1.0)), aucs, excluded)


def driver_design(tails: pd.DataFrame, covariate_set: int, offset_scale: str = "log"):
    """Driver-level covariates from tail statistics.

    Set 1 uses the per-dimension maxima, set 2 the full tail grid and maxima,
    set 3 adds the number of trips as an offset (``offset_scale`` "log" or
    "raw").  Returns ``(covariates, offset)`` indexed by driver id.
    """
    if covariate_set not in (1, 2, 3):
        raise DesignError("covariate set must be 1, 2 or 3")
    stats_cols = ["max"] if covariate_set == 1 else [*TAIL_COLUMNS, "max"]
    wide = tails.pivot(index="driver_id", columns="dim", values=stats_cols)
    dims = list(dict.fromkeys(tails["dim"]))
    cols = [(s, d) for d in dims for s in stats_cols]
    X = wide[cols]
    X.columns = [f"{s}_{d}" for s, d in cols]
    if covariate_set < 3:
        return X, None
    n_trips = tails.groupby("driver_id")["n_trips"].first().reindex(X.index).astype(float)
    if offset_scale == "log":
        off = np.log(n_trips)
    elif offset_scale == "raw":
        off = n_trips
    else:
        raise DesignError("offset scale must be 'log' or 'raw'")
    return X, off.to_numpy()
