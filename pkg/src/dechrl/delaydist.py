"""Per-effect categorical delay distributions learned from per-lag edge evidence.

Row ``i`` of the logit matrix ``beta`` (shape ``M x tau_max``) is softmax
normalized into a distribution over delays ``1..tau_max``. Training samples
delay hypotheses, weights them by the edge evidence of the lag SCMs and
follows a score-function gradient with an entropy/sparsity regularizer.
"""

from __future__ import annotations

import csv
import io
from typing import Mapping, Sequence

import numpy as np

from .scm import ScmTau, sigmoid

BETA_CLAMP = 10.0


def support_mask(tau_max: int, kappa: int = 1) -> np.ndarray:
    """Boolean mask over delays ``1..tau_max`` keeping multiples of ``kappa``."""
    if not 1 <= kappa <= tau_max:
        raise ValueError(f"kappa must lie in [1, {tau_max}], got {kappa}")
    taus = np.arange(1, tau_max + 1)
    return taus % kappa == 0


def support_lags(tau_max: int, kappa: int = 1) -> list[int]:
    return [int(t) for t in np.flatnonzero(support_mask(tau_max, kappa)) + 1]


def restrict_support(beta: np.ndarray, kappa: int) -> np.ndarray:
    """Copy of ``beta`` with non-multiples of ``kappa`` masked to -inf."""
    beta = np.array(beta, dtype=float)
    mask = support_mask(beta.shape[-1], kappa)
    beta[..., ~mask] = -np.inf
    return beta


def clamp(beta: np.ndarray) -> np.ndarray:
    finite = np.isfinite(beta)
    beta[finite] = np.clip(beta[finite], -BETA_CLAMP, BETA_CLAMP)
    return beta


def delay_distribution(beta: np.ndarray) -> np.ndarray:
    """Row-wise softmax; -inf entries get zero mass."""
    beta = np.atleast_2d(np.asarray(beta, dtype=float))
    top = np.max(beta, axis=1, keepdims=True)
    e = np.exp(beta - top)
    return e / e.sum(axis=1, keepdims=True)


def lag_evidence(scms: Mapping[int, ScmTau], n_effects: int, tau_max: int,
                 parents: Mapping[int, set] | None = None) -> np.ndarray:
    """``E[i, tau-1]`` = max over candidate causes of log sigmoid(eta^tau[i, j]).

    Candidates are the accepted parents of effect ``i`` when ``parents`` is
    given, otherwise every cause column. Lags without an SCM are NaN.
    """
    ev = np.full((n_effects, tau_max), np.nan)
    for tau, scm in scms.items():
        logp = np.log(np.clip(sigmoid(scm.eta), 1e-300, 1.0))
        logp = np.where(scm.candidate_mask, logp, -np.inf)
        for i in range(n_effects):
            cols = sorted(parents.get(i, ())) if parents is not None else None
            row = logp[i] if cols is None else logp[i, cols]
            ev[i, tau - 1] = row.max() if len(row) else -np.inf
    return ev


def hypothesis_loglik(h: Sequence[int], evidence: np.ndarray) -> np.ndarray:
    """Log-likelihood ``L_i`` of each effect's hypothesized delay ``h_i``."""
    h = np.asarray(h, dtype=int)
    vals = evidence[np.arange(len(h)), h - 1]
    if np.isnan(vals).any():
        missing = sorted({int(t) for t in h[np.isnan(vals)]})
        raise KeyError(f"no SCM for lag(s) {missing}")
    return vals


def regularizer_grad(beta: np.ndarray, lam1: float, lam2: float) -> np.ndarray:
    """Gradient of ``-lam1 * sum s(1-s) + lam2 * sum s`` with s the logistic of beta."""
    if lam1 < 0 or lam2 < 0:
        raise ValueError("regularizer weights must be non-negative")
    beta = np.asarray(beta, dtype=float)
    finite = np.isfinite(beta)
    s = sigmoid(np.where(finite, beta, 0.0))
    ds = s * (1.0 - s)
    grad = -lam1 * ds * (1.0 - 2.0 * s) + lam2 * ds
    return np.where(finite, grad, 0.0)


def regularizer(beta: np.ndarray, lam1: float, lam2: float) -> float:
    beta = np.asarray(beta, dtype=float)
    s = sigmoid(beta[np.isfinite(beta)])
    return float(-lam1 * np.sum(s * (1.0 - s)) + lam2 * np.sum(s))


def sample_hypotheses(probs: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` delay hypotheses (shape ``k x M``), each entry in ``1..tau_max``."""
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random((k, probs.shape[0], 1))
    return (u > cdf[None, :, :]).sum(axis=2) + 1


def score_function_grad(beta_row: np.ndarray, weights: np.ndarray, k: int,
                        rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Plain REINFORCE estimate of d/d beta of sum_tau softmax(beta)_tau * w_tau.

    Returns the mean of ``(OneHot(h) - p) * w_h`` over ``k`` draws and its
    standard error.
    """
    p = delay_distribution(beta_row)[0]
    h = sample_hypotheses(p[None, :], k, rng)[:, 0] - 1
    onehot = np.eye(len(p))[h]
    terms = (onehot - p[None, :]) * weights[h][:, None]
    return terms.mean(axis=0), terms.std(axis=0, ddof=1) / np.sqrt(k)


def delay_step(beta: np.ndarray, evidence: np.ndarray, k: int, rng: np.random.Generator,
               lr: float = 0.05, lam1: float = 0.05, lam2: float = 0.05) -> np.ndarray:
    """One iteration of the weighted score-function update (ascent)."""
    p = delay_distribution(beta)
    hyps = sample_hypotheses(p, k, rng)  # (k, M)
    rows = np.arange(beta.shape[0])
    loglik = evidence[rows[None, :], hyps - 1]  # (k, M)
    loglik = np.where(np.isnan(loglik), -np.inf, loglik)
    top = loglik.max(axis=0, keepdims=True)
    live = np.isfinite(top)[0]  # rows with no evidence at all are left untouched
    top = np.where(np.isfinite(top), top, 0.0)
    w = np.exp(loglik - top)
    w /= np.where(live, w.sum(axis=0), 1.0)[None, :]
    onehot = np.zeros((k,) + beta.shape)
    onehot[np.arange(k)[:, None], rows[None, :], hyps - 1] = 1.0
    grad = (w[:, :, None] * (onehot - p[None, :, :])).sum(axis=0)
    step = lr * (grad - regularizer_grad(beta, lam1, lam2))
    beta = beta + np.where(live[:, None], step, 0.0)
    return clamp(beta)


def train_delay(beta: np.ndarray, evidence: np.ndarray, k: int = 16, iterations: int = 100,
                rng: np.random.Generator | None = None, lr: float = 0.05,
                lam1: float = 0.05, lam2: float = 0.05) -> np.ndarray:
    """Fit delay logits to per-lag evidence; rows without evidence stay put."""
    if k < 2:
        raise ValueError("need at least two hypotheses per iteration")
    rng = np.random.default_rng() if rng is None else rng
    beta = clamp(np.array(beta, dtype=float))
    evidence = np.where(np.isfinite(beta), evidence, np.nan)
    for _ in range(iterations):
        beta = delay_step(beta, evidence, k, rng, lr, lam1, lam2)
    return beta


def format_csv(probs: np.ndarray, effect_names: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["effect", "tau", "probability"])
    for i, name in enumerate(effect_names):
        for t, p in enumerate(probs[i], start=1):
            w.writerow([name, t, f"{p:.9f}"])
    return buf.getvalue()


def parse_csv(text: str, effect_names: Sequence[str], tau_max: int) -> np.ndarray:
    idx = {n: i for i, n in enumerate(effect_names)}
    out = np.zeros((len(effect_names), tau_max))
    for row in csv.DictReader(io.StringIO(text)):
        out[idx[row["effect"]], int(row["tau"]) - 1] = float(row["probability"])
    return out


def delay_quantile(probs: np.ndarray, q: float = 0.9) -> np.ndarray:
    """Smallest delay per row whose cumulative mass reaches ``q``."""
    cdf = np.cumsum(np.atleast_2d(probs), axis=1)
    return (cdf < q - 1e-12).sum(axis=1) + 1


def point_mass(delays: Sequence[int], tau_max: int) -> np.ndarray:
    """Logit matrix whose softmax puts all mass on the given delays."""
    beta = np.full((len(delays), tau_max), -np.inf)
    beta[np.arange(len(delays)), np.asarray(delays, dtype=int) - 1] = 0.0
    return beta
