import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cthmm_telematics import CTHMM, Gamma, Normal
from cthmm_telematics.inference import (
    ZeroLikelihoodError,
    forward_backward,
    forward_backward_batch,
    log_likelihood,
    path_log_density,
    predictive_state,
    predictive_states,
    viterbi,
    viterbi_batch,
)
from cthmm_telematics.prep import SubInterval
from oracles import Enumeration, emission_density, expm_mp, random_model, random_sub


def one_dim_model(pi, Q, emissions):
    return CTHMM(np.asarray(pi), np.asarray(Q), [[e] for e in emissions], ("x",))


def sub_of(t, y):
    y = np.asarray(y, dtype=float).reshape(len(t), -1)
    return SubInterval("trip", 0, np.asarray(t, dtype=float), y, 0, len(t))


def test_single_observation_is_bayes_rule():
    m = one_dim_model([0.3, 0.7], [[-1, 1], [1, -1]], [Normal(0, 1), Normal(2, 1)])
    r = forward_backward(m, sub_of([0.0], [0.5]))
    w = np.array([0.3 * stats.norm.pdf(0.5), 0.7 * stats.norm.pdf(0.5, 2)])
    assert np.allclose(r.smoothers[0], w / w.sum(), atol=1e-14)
    assert r.log_likelihood == pytest.approx(math.log(w.sum()), abs=1e-12)


def test_single_state_collapses_to_iid():
    m = one_dim_model([1.0], [[0.0]], [Gamma(2.0, 3.0)])
    y = np.array([1.0, 4.0, 2.5, 9.0])
    sub = sub_of([0, 0.4, 2.0, 2.1], y)
    r = forward_backward(m, sub)
    assert np.all(r.smoothers == 1.0)
    assert r.log_likelihood == pytest.approx(stats.gamma.logpdf(y, 2.0, scale=3.0).sum(), abs=1e-10)
    assert list(viterbi(m, sub).states) == [0, 0, 0, 0]
    assert np.all(predictive_states(m, sub) == 1.0)


@pytest.mark.parametrize("seed", range(6))
def test_forward_backward_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    S = 3
    m = random_model(rng, S)
    sub = random_sub(rng, 3)
    ref = Enumeration(m, sub)
    r = forward_backward(m, sub)
    assert np.allclose(r.smoothers, ref.smoothers(), atol=1e-10)
    assert np.allclose(r.two_slice, ref.two_slice(), atol=1e-10)
    assert r.log_likelihood == pytest.approx(math.log(ref.likelihood), abs=1e-10)


@pytest.mark.parametrize("seed", range(6))
def test_viterbi_matches_enumeration(seed):
    rng = np.random.default_rng(100 + seed)
    m = random_model(rng, 3)
    sub = random_sub(rng, 4)
    ref_path, ref_score = Enumeration(m, sub).best_path()
    path = viterbi(m, sub)
    assert list(path.states) == list(ref_path)
    assert path.log_score == pytest.approx(ref_score, abs=1e-10)
    assert path.log_score == pytest.approx(path_log_density(m, sub, path.states), abs=1e-9)


def test_viterbi_ties_go_to_lower_state():
    # two identical states: every path has the same score
    m = one_dim_model([0.5, 0.5], [[-1, 1], [1, -1]], [Normal(0, 1), Normal(0, 1)])
    assert list(viterbi(m, sub_of([0, 1, 2], [0.1, -0.2, 0.3])).states) == [0, 0, 0]


def test_disjoint_supports_force_the_path():
    # state 0 lives on (0, inf) for a gamma, state 1 gets negative values via a second dimension
    Q = [[-0.5, 0.5], [0.5, -0.5]]
    m = CTHMM(
        np.array([0.5, 0.5]),
        np.array(Q),
        [[Normal(10, 1), Normal(0, 1)], [Normal(-10, 1), Normal(0, 1)]],
        ("x", "y"),
    )
    y = [[10, 0], [-10, 0], [-10, 0], [10, 0]]
    assert list(viterbi(m, sub_of([0, 1, 2, 3], y)).states) == [0, 1, 1, 0]


def test_invariants_of_posteriors():
    rng = np.random.default_rng(7)
    m = random_model(rng, 4)
    sub = random_sub(rng, 30)
    r = forward_backward(m, sub)
    assert np.allclose(r.smoothers.sum(axis=1), 1.0, atol=1e-10)
    assert np.allclose(r.two_slice.sum(axis=(1, 2)), 1.0, atol=1e-10)
    assert np.allclose(r.two_slice.sum(axis=2), r.smoothers[:-1], atol=1e-9)
    assert np.allclose(r.two_slice.sum(axis=1), r.smoothers[1:], atol=1e-9)
    assert viterbi(m, sub).log_score <= r.log_likelihood


def test_scaled_matches_unscaled_forward():
    rng = np.random.default_rng(9)
    m = random_model(rng, 3)
    sub = random_sub(rng, 12)
    f = emission_density(m, sub.y)
    alpha = m.pi * f[0]
    for l, dt in enumerate(np.diff(sub.t), start=1):
        alpha = alpha @ expm_mp(m.Q, dt) * f[l]
    assert forward_backward(m, sub).log_likelihood == pytest.approx(math.log(alpha.sum()), abs=1e-9)


def test_long_sequence_does_not_underflow():
    rng = np.random.default_rng(1)
    m = random_model(rng, 3)
    sub = random_sub(rng, 5000)
    r = forward_backward(m, sub)
    assert np.isfinite(r.log_likelihood) and r.log_likelihood < -1000
    assert np.allclose(r.smoothers.sum(axis=1), 1.0, atol=1e-10)


def test_batching_and_padding_do_not_change_results():
    rng = np.random.default_rng(3)
    m = random_model(rng, 3)
    subs = [random_sub(rng, T) for T in (0, 1, 5, 17, 2)]
    batch, tables = forward_backward_batch(m, subs)
    for s, b in zip(subs, batch):
        single = forward_backward(m, s)
        assert b.log_likelihood == pytest.approx(single.log_likelihood, abs=1e-12)
        assert np.allclose(b.smoothers, single.smoothers, atol=1e-13)
        assert np.allclose(b.two_slice, single.two_slice, atol=1e-13)
    paths = viterbi_batch(m, subs)
    for s, p in zip(subs, paths):
        assert list(p.states) == list(viterbi(m, s).states)
    n_pairs = sum(len(s.t) - 1 for s in subs)
    assert tables.counts.sum() == pytest.approx(n_pairs, abs=1e-9)


def test_likelihood_is_order_invariant():
    rng = np.random.default_rng(8)
    m = random_model(rng, 3)
    subs = [random_sub(rng, int(T)) for T in rng.integers(1, 20, 8)]
    total = log_likelihood(m, subs)
    assert log_likelihood(m, subs[::-1]) == pytest.approx(total, abs=1e-9)
    assert sum(forward_backward(m, s).log_likelihood for s in subs) == pytest.approx(total, abs=1e-9)


def test_predictive_state_with_uninformative_first_emission():
    Q = np.array([[-0.4, 0.3, 0.1], [0.2, -0.2, 0.0], [0.5, 0.5, -1.0]])
    pi = np.array([0.2, 0.5, 0.3])
    m = one_dim_model(pi, Q, [Normal(0, 1)] * 3)
    sub = sub_of([0.0, 1.3], [0.4, 0.0])
    w = pi @ expm_mp(Q, 1.3)
    assert np.allclose(predictive_state(m, sub, 1), w / w.sum(), atol=1e-12)


def test_predictive_state_by_hand_two_states():
    Q = np.array([[-0.5, 0.5], [1.0, -1.0]])
    m = one_dim_model([0.6, 0.4], Q, [Normal(0, 1), Normal(3, 2)])
    sub = sub_of([0.0, 0.8, 1.5], [1.0, 2.0, 0.0])
    f0 = np.array([stats.norm.pdf(1.0), stats.norm.pdf(1.0, 3, math.sqrt(2))])
    post0 = np.array([0.6, 0.4]) * f0
    post0 /= post0.sum()
    P = expm_mp(Q, 0.8)
    by_hand = np.array([sum(post0[u] * P[u, v] for u in range(2)) for v in range(2)])
    assert np.allclose(predictive_state(m, sub, 1), by_hand, atol=1e-12)
    with pytest.raises(IndexError):
        predictive_state(m, sub, 0)


def test_zero_density_names_the_observation():
    m = one_dim_model([1.0], [[0.0]], [Gamma(2.0, 1.0)])
    with pytest.raises(ZeroLikelihoodError, match="observation 2"):
        forward_backward(m, sub_of([0, 1, 2], [1.0, 2.0, -1.0]))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(0, 12), st.integers(0, 2**32 - 1))
def test_posterior_rows_are_distributions(S, T, seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, S)
    sub = random_sub(rng, T)
    r = forward_backward(m, sub)
    assert np.allclose(r.smoothers.sum(axis=1), 1.0, atol=1e-10)
    assert np.all(r.smoothers >= -1e-15)
    assert np.allclose(r.predictive.sum(axis=1), 1.0, atol=1e-12)
    assert viterbi(m, sub).log_score <= r.log_likelihood + 1e-9
