from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dechrl import delaydist as dd
from dechrl.scm import ScmTau


def logit(p):
    return np.log(p / (1 - p))


def test_uniform_and_softmax_examples():
    np.testing.assert_allclose(dd.delay_distribution(np.zeros((1, 4)))[0], [.25] * 4)
    np.testing.assert_allclose(dd.delay_distribution([[0, np.log(2), 0, 0]])[0],
                               [.2, .4, .2, .2])


def test_simplified_support_mass():
    p = dd.delay_distribution(dd.restrict_support(np.zeros((2, 8)), 4))
    assert np.flatnonzero(p[0]).tolist() == [3, 7]
    np.testing.assert_allclose(p.sum(axis=1), 1.0)


@given(arrays(float, (3, 6), elements=st.floats(-50, 50)))
@settings(max_examples=100, deadline=None)
def test_rows_sum_to_one(beta):
    p = dd.delay_distribution(beta)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_support_examples():
    assert dd.support_lags(8, 1) == list(range(1, 9))
    assert dd.support_lags(8, 4) == [4, 8]
    assert dd.support_lags(30, 4) == [4, 8, 12, 16, 20, 24, 28]
    beta = np.random.default_rng(0).normal(size=(2, 5))
    np.testing.assert_array_equal(dd.restrict_support(beta, 1), beta)
    with pytest.raises(ValueError):
        dd.restrict_support(beta, 6)


def scms_with(eta_by_tau, n_causes):
    out = {}
    for tau, eta in eta_by_tau.items():
        scm = ScmTau(tau, 1, n_causes, eta=np.array(eta, float),
                     candidate_mask=np.ones((1, n_causes), bool))
        out[tau] = scm
    return out


def test_lag_evidence_examples():
    ev = dd.lag_evidence(scms_with({1: [[40.0, -40.0]], 2: [[0.0, -40.0]],
                                    3: [[logit(.3), logit(.9)]]}, 2), 1, 3)
    assert ev[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert ev[0, 1] == pytest.approx(np.log(.5))
    assert ev[0, 2] == pytest.approx(np.log(.9))


def test_missing_lag_is_an_error():
    ev = dd.lag_evidence(scms_with({1: [[0.0]]}, 1), 1, 3)
    assert dd.hypothesis_loglik([1], ev)[0] == pytest.approx(np.log(.5))
    with pytest.raises(KeyError):
        dd.hypothesis_loglik([2], ev)


def test_identical_evidence_stays_uniform(rng):
    ev = np.full((2, 4), np.log(.7))
    beta = dd.train_delay(np.zeros((2, 4)), ev, rng=rng)
    p = dd.delay_distribution(beta)
    assert np.abs(p - .25).max() < .1


def test_dominant_lag_recovered(rng):
    ev = np.log(np.array([[.05, .05, .95, .05]]))
    beta = dd.train_delay(np.zeros((1, 4)), ev, rng=rng, iterations=300)
    assert int(np.argmax(beta[0])) + 1 == 3


def test_rows_without_evidence_untouched(rng):
    ev = np.array([[np.log(.9), np.log(.1)], [np.nan, np.nan]])
    beta = dd.train_delay(np.zeros((2, 2)), ev, rng=rng)
    np.testing.assert_array_equal(beta[1], 0.0)
    assert beta[0, 0] > beta[0, 1]


def test_regulariser_zero_weights():
    beta = np.random.default_rng(1).normal(size=(2, 4))
    np.testing.assert_array_equal(dd.regularizer_grad(beta, 0, 0), 0.0)


def test_regulariser_finite_differences():
    rng = np.random.default_rng(7)
    beta = rng.normal(size=(2, 4))
    grad = dd.regularizer_grad(beta, .05, .05)
    h = 1e-5
    fd = np.zeros_like(beta)
    for idx in np.ndindex(beta.shape):
        up, down = beta.copy(), beta.copy()
        up[idx] += h
        down[idx] -= h
        fd[idx] = (dd.regularizer(up, .05, .05) - dd.regularizer(down, .05, .05)) / (2 * h)
    np.testing.assert_allclose(grad, fd, atol=1e-6)


def test_score_function_unbiased(rng):
    beta = np.array([0.3, -0.2, 0.5])
    w = np.array([0.2, 1.0, 0.6])
    p = dd.delay_distribution(beta)[0]
    exact = p * (w - p @ w)
    mean, se = dd.score_function_grad(beta, w, 100_000, rng)
    assert np.all(np.abs(mean - exact) < 2 * se)


def test_csv_roundtrip():
    p = dd.delay_distribution(np.random.default_rng(2).normal(size=(2, 3)))
    text = dd.format_csv(p, ["a", "b"])
    assert text.splitlines()[0] == "effect,tau,probability"
    np.testing.assert_allclose(dd.parse_csv(text, ["a", "b"], 3), p, atol=1e-8)


def test_quantile_and_point_mass():
    assert dd.delay_quantile(np.array([[.5, .3, .2]]), .9).tolist() == [3]
    assert dd.delay_quantile(np.array([[.95, .05, 0]]), .9).tolist() == [1]
    np.testing.assert_array_equal(dd.delay_distribution(dd.point_mass([2], 4))[0], [0, 1, 0, 0])
