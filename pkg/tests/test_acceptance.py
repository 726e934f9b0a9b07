"""Acceptance suite: one PASS/FAIL line per criterion, with runtimes.

Run with ``pytest tests/test_acceptance.py`` (lines are repeated in the
terminal summary) or ``python tests/test_acceptance.py``.  The UAH-DriveSet
reproduction runs only when ``UAH_DRIVESET`` points at the unpacked dataset.
"""

from __future__ import annotations

import itertools
import math
import os
import time

import numpy as np
import pandas as pd
import pytest
from scipy import optimize, stats
from scipy.special import expit, log_expit

from cthmm_telematics import CTHMM, Gamma, Normal
from cthmm_telematics.anomaly import residuals_frame, trip_indices
from cthmm_telematics.ctmc import CountTables, expm_integrals
from cthmm_telematics.em import FitConfig, fit
from cthmm_telematics.inference import forward_backward, viterbi
from cthmm_telematics.scoring import cross_validate, fit_logistic, roc_auc
from cthmm_telematics.simulate import SimConfig, group_trips, simulate

from oracles import Enumeration, endpoint_integrals, random_generator, random_model, random_sub

REPORT: list[str] = []
UAH_ENV = "UAH_DRIVESET"


def report(number: int, title: str, ok: bool | None, detail: str, seconds: float, limit: float | None = None):
    within = limit is None or seconds <= limit
    status = "SKIP" if ok is None else ("PASS" if ok and within else "FAIL")
    budget = f" (limit {limit:g} s)" if limit is not None else ""
    line = f"{status} criterion {number} [{title}]: {detail}; {seconds:.1f} s{budget}"
    REPORT.append(line)
    print(line)
    return status


def _check(status: str, line_hint: str):
    if status == "SKIP":
        pytest.skip(line_hint)
    assert status == "PASS", REPORT[-1]


# --- shared generators ------------------------------------------------------------


def recovery_generator() -> CTHMM:
    Q = np.array([[-0.5, 0.3, 0.2], [0.25, -0.45, 0.2], [0.3, 0.3, -0.6]])
    emissions = [
        [Gamma(6.0, 4.0), Normal(-0.8, 0.09), Normal(0.3, 0.04)],
        [Gamma(12.0, 5.0), Normal(0.25, 0.09), Normal(0.9, 0.09)],
        [Gamma(30.0, 3.5), Normal(0.8, 0.16), Normal(1.6, 0.09)],
    ]
    return CTHMM(np.array([0.45, 0.35, 0.2]), Q, emissions)


def driving_generator() -> CTHMM:
    Q = np.array([[-0.3, 0.2, 0.1], [0.15, -0.3, 0.15], [0.1, 0.3, -0.4]])
    emissions = [
        [Gamma(4.0, 5.0), Normal(0.0, 0.09), Normal(0.2, 0.04)],
        [Gamma(9.0, 6.0), Normal(0.3, 0.25), Normal(0.6, 0.09)],
        [Gamma(16.0, 6.0), Normal(-0.4, 0.16), Normal(1.0, 0.16)],
    ]
    return CTHMM(np.array([0.4, 0.35, 0.25]), Q, emissions)


# --- 1. exact inference -------------------------------------------------------------


def test_criterion_1_exact_inference():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    paths_ok = True
    for _ in range(50):
        S = int(rng.integers(1, 4))
        T = int(rng.integers(0, 5))  # T + 1 <= 5 observations
        model = random_model(rng, S)
        sub = random_sub(rng, T)
        ref = Enumeration(model, sub)
        res = forward_backward(model, sub)
        worst = max(worst, np.max(np.abs(res.smoothers - ref.smoothers())))
        if T > 0:
            worst = max(worst, np.max(np.abs(res.two_slice - ref.two_slice())))
        worst = max(worst, abs(res.log_likelihood - math.log(ref.likelihood)))
        best, _ = ref.best_path()
        paths_ok &= list(viterbi(model, sub).states) == list(best)
    ok = worst <= 1e-10 and paths_ok
    status = report(1, "exact-inference oracle", ok, f"max abs error {worst:.2e} (tol 1e-10), Viterbi paths equal: {paths_ok}",
                    time.perf_counter() - start, 10)
    _check(status, "")


# --- 2. expm integrals --------------------------------------------------------------


def test_criterion_2_expm_integrals():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    err, cons = 0.0, 0.0
    for _ in range(20):
        S = int(rng.integers(2, 5))
        Q = random_generator(rng, S)
        for delta in (0.1, 1.0, 5.0):
            counts = rng.uniform(0, 3, size=(S, S))
            got = expm_integrals(Q, CountTables(np.array([delta]), counts[None]))
            ref_tau, ref_n = endpoint_integrals(Q, delta, counts)
            err = max(err, np.max(np.abs(got.E_tau - ref_tau)), np.max(np.abs(got.E_n - ref_n)))
            for a, b in itertools.product(range(S), repeat=2):
                unit = np.zeros((S, S))
                unit[a, b] = 1.0
                tau = expm_integrals(Q, CountTables(np.array([delta]), unit[None])).E_tau
                cons = max(cons, abs(tau.sum() - delta))
    ok = err <= 1e-7 and cons <= 1e-8
    status = report(2, "expm-integral oracle", ok, f"max quadrature error {err:.2e} (tol 1e-7), conservation error {cons:.2e} (tol 1e-8)",
                    time.perf_counter() - start, 30)
    _check(status, "")


# --- 3. EM monotonicity -------------------------------------------------------------


def monotone_datasets():
    two = CTHMM(np.array([0.5, 0.5]), np.array([[-0.4, 0.4], [0.3, -0.3]]),
                [[Normal(0.0, 1.0)], [Normal(2.0, 1.5)]], ("a_long",))
    four_q = np.array([[-0.6, 0.2, 0.2, 0.2], [0.1, -0.3, 0.1, 0.1], [0.3, 0.1, -0.5, 0.1], [0.2, 0.2, 0.2, -0.6]])
    four = CTHMM(np.full(4, 0.25), four_q,
                 [[Gamma(3.0 + 4 * u, 4.0), Normal(0.2 * u, 0.3)] for u in range(4)], ("speed", "a_long"))
    return [
        (two, ("normal",), 2),
        (recovery_generator(), ("gamma", "normal", "normal"), 3),
        (four, ("gamma", "normal"), 4),
    ]


def test_criterion_3_em_monotonicity():
    start = time.perf_counter()
    worst = 0.0
    violations = 0
    runs = 0
    for k, (gen, families, S) in enumerate(monotone_datasets()):
        subs, _ = simulate(SimConfig(model=gen, n_sub_intervals=25, n_obs=40, seed=100 + k))
        for seed in range(10):
            cfg = FitConfig(n_states=S, families=families, dims=gen.dims, max_iters=200, rel_tol=1e-300, seed=seed)
            trace = np.array(fit(subs, cfg).diagnostics["trace"])
            drop = (trace[:-1] - trace[1:]) / np.abs(trace[:-1])
            worst = max(worst, float(drop.max()) if len(drop) else 0.0)
            violations += int(np.sum(drop > 1e-8))
            runs += 1
    ok = violations == 0
    status = report(3, "EM monotonicity", ok, f"{runs} runs x 200 iterations, violations {violations}, largest relative drop {worst:.1e} (tol 1e-8)",
                    time.perf_counter() - start, 300)
    _check(status, "")


# --- 4. parameter recovery ----------------------------------------------------------


def best_permutation(fitted: CTHMM, truth: CTHMM):
    means_t = np.array([[e.mean() for e in row] for row in truth.emissions])
    best = None
    for perm in itertools.permutations(range(truth.n_states)):
        m = fitted.permuted(list(perm))
        means = np.array([[e.mean() for e in row] for row in m.emissions])
        score = np.max(np.abs(means - means_t) / np.abs(means_t))
        if best is None or score < best[0]:
            best = (score, m)
    return best[1]


def relative_errors(model: CTHMM, truth: CTHMM, pi_target) -> dict:
    off = ~np.eye(truth.n_states, dtype=bool)
    means = np.array([[e.mean() for e in row] for row in model.emissions])
    means_t = np.array([[e.mean() for e in row] for row in truth.emissions])
    return {
        "pi": float(np.max(np.abs(model.pi - pi_target) / pi_target)),
        "Q": float(np.max(np.abs(model.Q[off] - truth.Q[off]) / truth.Q[off])),
        "means": float(np.max(np.abs(means - means_t) / np.abs(means_t))),
    }


def test_criterion_4_parameter_recovery():
    start = time.perf_counter()
    truth = recovery_generator()
    literal, realised = 0, 0
    worst = {"pi": 0.0, "Q": 0.0, "means": 0.0}
    alone = dict.fromkeys(worst, 0)
    worst_realised_pi = 0.0
    for seed in range(10):
        subs, sim_truth = simulate(
            SimConfig(model=truth, n_sub_intervals=200, n_obs=100, n_obs_jitter=20, seed=seed)
        )
        model = fit(subs, FitConfig(n_states=3, seed=seed))
        model = best_permutation(model, truth)
        freq = np.bincount([z[0] for z in sim_truth.observed_states], minlength=3) / len(subs)
        e = relative_errors(model, truth, truth.pi)
        e_real = relative_errors(model, truth, freq)
        for key in worst:
            worst[key] = max(worst[key], e[key])
        worst_realised_pi = max(worst_realised_pi, e_real["pi"])
        for key in alone:
            alone[key] += e[key] <= 0.10
        literal += all(v <= 0.10 for v in e.values())
        realised += all(v <= 0.10 for v in e_real.values())
    ok = literal >= 9
    detail = (
        f"{literal}/10 seeds within 10% of the generator (need 9); per parameter pi {alone['pi']}/10, "
        f"Q {alone['Q']}/10, means {alone['means']}/10; worst errors pi {worst['pi']:.3f}, "
        f"Q {worst['Q']:.3f}, means {worst['means']:.3f}; against realised initial-state frequencies "
        f"{realised}/10 (worst pi {worst_realised_pi:.3f})"
    )
    status = report(4, "parameter recovery", ok, detail, time.perf_counter() - start, 600)
    _check(status, "")


# --- 5 and 7. calibration and thresholds --------------------------------------------

_CACHE: dict = {}


def calibration_residuals() -> pd.DataFrame:
    if "residuals" not in _CACHE:
        gen = driving_generator()
        # 100 sub-intervals of 101 observations give 10^4 residuals per dimension
        subs, _ = simulate(SimConfig(model=gen, n_sub_intervals=100, n_obs=101, seed=555))
        _CACHE["residuals"] = residuals_frame(gen, group_trips(subs))
    return _CACHE["residuals"]


def test_criterion_5_residual_calibration():
    start = time.perf_counter()
    res = calibration_residuals()
    pvals = {}
    for dim, grp in res.groupby("dim", sort=False):
        z = grp["z"].to_numpy()
        assert len(z) == 10_000
        pvals[dim] = stats.kstest(z, "norm").pvalue
    pvals["pooled"] = stats.kstest(res["z"].to_numpy(), "norm").pvalue
    rate = float(np.mean(np.abs(res["z"].to_numpy()) >= 3))
    ok = all(p > 0.01 for p in pvals.values()) and 0.001 <= rate <= 0.006
    ks = ", ".join(f"{d} p={p:.3f}" for d, p in pvals.items())
    status = report(5, "residual calibration", ok, f"KS on 10^4 z per dimension: {ks}; |z|>=3 rate {rate:.4f} (need [0.001, 0.006])",
                    time.perf_counter() - start, 120)
    _check(status, "")


def test_criterion_7_threshold_monotonicity():
    res = calibration_residuals()
    start = time.perf_counter()
    dims = ["speed", "a_long", "a_lat"]
    idx = {k: trip_indices(res, dims, threshold=k) for k in (2, 3, 4)}
    cols = ["A_speed", "A_long", "A_lat"]
    mono = all(np.all(idx[2][c] >= idx[3][c]) and np.all(idx[3][c] >= idx[4][c]) for c in cols)
    medians = {c: float(idx[4][c].median()) for c in cols}
    ok = mono and all(v == 0 for v in medians.values())
    status = report(7, "threshold monotonicity", ok, f"non-increasing 2>=3>=4: {mono}; medians at 4 SD {medians}",
                    time.perf_counter() - start, 60)
    _check(status, "")


# --- 6. synthetic anomaly detection -------------------------------------------------


def test_criterion_6_synthetic_anomaly_detection():
    start = time.perf_counter()
    gen = driving_generator()
    subs, truth = simulate(
        SimConfig(model=gen, n_sub_intervals=300, n_obs=100, n_obs_jitter=20, contamination_fraction=0.10,
                  contamination={1: (3.0, 0.0)}, seed=66)
    )
    # unsupervised: the model is fitted on the contaminated data itself
    model = fit(subs, FitConfig(n_states=3, seed=0))
    res = residuals_frame(model, group_trips(subs))
    idx = trip_indices(res, list(model.dims))
    labels = pd.Series(truth.contaminated.astype(int), index=[s.trip_id for s in subs])
    y = labels.reindex(idx["trip_id"]).to_numpy()
    X = idx[["A_speed", "A_long", "A_lat"]].to_numpy()
    cv = cross_validate(X, y, k=5, seed=0)
    ok = cv.mean_auc >= 0.85
    status = report(6, "synthetic anomaly detection", ok,
                    f"5-fold CV ROC-AUC {cv.mean_auc:.3f} (need >= 0.85) on {len(y)} trips, {int(y.sum())} contaminated",
                    time.perf_counter() - start, 900)
    _check(status, "")


# --- 8. UAH-DriveSet --------------------------------------------------------------------


def test_criterion_8_uah_driveset():
    root = os.environ.get(UAH_ENV)
    start = time.perf_counter()
    if not root or not os.path.isdir(root):
        status = report(8, "UAH-DriveSet reproduction", None, f"dataset not found (set {UAH_ENV} to the unpacked folder)", 0.0)
        _check(status, f"{UAH_ENV} not set")
        return
    from cthmm_telematics.uah import find_trips, load_trip

    trips = find_trips(root)
    hits, drivers_seen, lines = 0, 0, []
    for driver in ["D1", "D2", "D3", "D4", "D5"]:
        mine = [t for t in trips if t.driver == driver]
        if not mine:
            continue
        drivers_seen += 1
        series = [load_trip(t, i) for i, t in enumerate(mine)]
        data = [s for tr in series for s in tr.sub_intervals]
        scores = np.zeros(len(mine))
        for seed in range(5):
            model = fit(data, FitConfig(n_states=20, families=("gamma", "normal", "normal"), seed=seed))
            idx = trip_indices(residuals_frame(model, series), list(model.dims)).set_index("trip_id")
            scores += idx["A_long"].reindex(range(len(mine))).fillna(0.0).to_numpy() / 5
        top3 = set(np.argsort(-scores, kind="stable")[:3])
        aggressive = {i for i, t in enumerate(mine) if t.aggressive}
        hit = bool(aggressive) and aggressive <= top3
        hits += hit
        lines.append(f"{driver}:{'yes' if hit else 'no'}")
    ok = drivers_seen == 5 and hits >= 4
    status = report(8, "UAH-DriveSet reproduction", ok, f"aggressive trips in top 3 for {hits}/5 drivers (need 4): {' '.join(lines)}",
                    time.perf_counter() - start, 7200)
    _check(status, "")


# --- 9. scoring oracles -----------------------------------------------------------------


def _pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    return sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg) / (len(pos) * len(neg))


def test_criterion_9_scoring_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(99)
    coef_err = 0.0
    for d in range(5):
        n, p = 300 + 100 * d, 2 + d % 3
        X = rng.normal(size=(n, p))
        beta = rng.normal(0, 0.8, p + 1)
        offset = rng.normal(0, 0.5, n) if d % 2 else np.zeros(n)
        y = (rng.random(n) < expit(beta[0] + X @ beta[1:] + offset)).astype(int)
        Xd = np.column_stack([np.ones(n), X])

        def nll(b):
            eta = Xd @ b + offset
            return -np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta))

        def grad(b):
            return -Xd.T @ (y - expit(Xd @ b + offset))

        ref = optimize.minimize(nll, np.zeros(p + 1), jac=grad, method="BFGS", options={"gtol": 1e-11, "maxiter": 10_000}).x
        coef_err = max(coef_err, float(np.max(np.abs(fit_logistic(X, y, offset).coef - ref))))
    exact = 0
    for _ in range(100):
        n = int(rng.integers(2, 12))
        scores = rng.integers(0, 6, n) / 5
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        exact += roc_auc(scores, labels) == _pairwise_auc(scores, labels)
    ok = coef_err <= 1e-6 and exact == 100
    status = report(9, "scoring-stage oracles", ok, f"max coefficient gap vs BFGS {coef_err:.1e} (tol 1e-6); AUC exact on {exact}/100 sets",
                    time.perf_counter() - start, 30)
    _check(status, "")


if __name__ == "__main__":
    import sys

    for name, func in sorted(globals().items(), key=lambda kv: int(kv[0].split("_")[2]) if kv[0].startswith("test_criterion_") else 0):
        if name.startswith("test_criterion_"):
            try:
                func()
            except (AssertionError, pytest.skip.Exception):
                pass
    sys.exit(0 if all(not line.startswith("FAIL") for line in REPORT) else 1)
