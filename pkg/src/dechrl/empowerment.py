"""Delay-weighted conditional mutual information between option and delayed effect.

For one effect variable and a fixed current state, a channel is described by
the option policy ``pi`` (length ``n_options``) and, per lag, a conditional
outcome table ``f[tau]`` of shape ``(n_options, n_outcomes)``. The value is

    sum_tau w_tau * [H(sum_o pi(o) f_tau(.|o)) - sum_o pi(o) H(f_tau(.|o))]

with ``w`` the learned delay distribution of the effect.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NORM_TOL = 1e-8


@dataclass(frozen=True)
class EmpowermentEstimate:
    value: float
    per_tau: np.ndarray
    variance: float = 0.0


def _check_distribution(p: np.ndarray, what: str) -> None:
    if np.any(p < -NORM_TOL) or np.any(np.abs(p.sum(axis=-1) - 1.0) > NORM_TOL):
        raise ValueError(f"{what} rows must be non-negative and sum to 1")


def entropy(p: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) along the last axis; 0 log 0 = 0."""
    p = np.asarray(p, dtype=float)
    safe = np.where(p > 0, p, 1.0)
    return -np.sum(np.where(p > 0, p * np.log(safe), 0.0), axis=-1)


def cmi_exact(pi: np.ndarray, f: np.ndarray) -> float:
    """I(outcome; option | state) for one lag via the entropy decomposition."""
    pi = np.asarray(pi, dtype=float)
    f = np.asarray(f, dtype=float)
    _check_distribution(pi, "policy")
    _check_distribution(f, "outcome table")
    marginal = pi @ f
    return float(entropy(marginal) - pi @ entropy(f))


def _stack_tables(f_by_tau, n_lags: int) -> np.ndarray:
    f = np.asarray(f_by_tau, dtype=float)
    if f.ndim == 2:
        f = np.broadcast_to(f, (n_lags,) + f.shape)
    if f.shape[0] != n_lags:
        raise ValueError(f"expected {n_lags} outcome tables, got {f.shape[0]}")
    return f


def empowerment_exact(pi: np.ndarray, f_by_tau, delay_weights: np.ndarray) -> EmpowermentEstimate:
    """Exact delay-weighted empowerment by enumeration of options and outcomes.

    ``f_by_tau`` is either one table shared by every lag or an array of shape
    ``(tau_max, n_options, n_outcomes)``. Lags with zero weight are skipped.
    """
    w = np.asarray(delay_weights, dtype=float)
    pi = np.asarray(pi, dtype=float)
    _check_distribution(w, "delay weights")
    _check_distribution(pi, "policy")
    f = _stack_tables(f_by_tau, len(w))
    _check_distribution(f, "outcome table")
    per_tau = per_lag_cmi(pi, f)
    return EmpowermentEstimate(float(w @ per_tau), per_tau, 0.0)


def per_lag_cmi(pi: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Vectorized CMI for tables ``f`` of shape (lags, options, outcomes); no checks."""
    marginal = np.einsum("o,toy->ty", pi, f)
    return entropy(marginal) - entropy(f) @ pi


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    top = np.max(a, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    return np.squeeze(top, axis=axis) + np.log(np.sum(np.exp(a - top), axis=axis))


def empowerment_mc(pi: np.ndarray, f_by_tau, delay_weights: np.ndarray, k_samples: int,
                   rng: np.random.Generator) -> EmpowermentEstimate:
    """Monte Carlo estimate of :func:`empowerment_exact`.

    Per lag, draws ``o ~ pi`` and ``y ~ f(.|o)`` and averages
    ``log f(y|o) - log sum_o' pi(o') f(y|o')``; the marginal is evaluated in
    log space with a log-sum-exp.
    """
    if k_samples < 1:
        raise ValueError("k_samples must be >= 1")
    pi = np.asarray(pi, dtype=float)
    w = np.asarray(delay_weights, dtype=float)
    _check_distribution(pi, "policy")
    _check_distribution(w, "delay weights")
    f = _stack_tables(f_by_tau, len(w))
    _check_distribution(f, "outcome table")
    with np.errstate(divide="ignore"):
        log_pi = np.log(pi)
        log_f = np.log(f)
    per_tau = np.zeros(len(w))
    var = 0.0
    for t in np.flatnonzero(w > 0):
        o = rng.choice(len(pi), size=k_samples, p=pi)
        cdf = np.cumsum(f[t][o], axis=1)
        y = (rng.random((k_samples, 1)) > cdf).sum(axis=1)
        y = np.minimum(y, f.shape[2] - 1)
        log_cond = log_f[t][o, y]
        log_marg = _logsumexp(log_pi[:, None] + log_f[t][:, y], axis=0)
        terms = log_cond - log_marg
        per_tau[t] = terms.mean()
        if k_samples > 1:
            var += w[t] ** 2 * terms.var(ddof=1) / k_samples
    return EmpowermentEstimate(float(w @ per_tau), per_tau, float(var))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def grad_log_softmax(logits: np.ndarray, option: int) -> np.ndarray:
    """Gradient of ``log softmax(logits)[option]`` with respect to the logits."""
    g = -softmax(logits)
    g[option] += 1.0
    return g


def normalize_advantages(values: np.ndarray) -> np.ndarray:
    """Subtract the batch mean and divide by batch std plus 1e-6."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return v
    return (v - v.mean()) / (v.std() + 1e-6)


def advantage_update(logits: np.ndarray, state: int, option: int, advantage: float,
                     lr: float = 0.1, weight: float = 1.0) -> np.ndarray:
    """In-place step of a tabular softmax policy ``logits[state]`` along adv * grad log pi."""
    if advantage == 0.0 or weight == 0.0:
        return logits
    logits[state] += lr * weight * advantage * grad_log_softmax(logits[state], option)
    return logits
