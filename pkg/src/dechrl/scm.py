"""Per-lag structural causal models learned from interventional records.

One :class:`ScmTau` exists per supported lag. Each holds adjacency logits
``eta`` of shape ``(M, M + N)`` (effect rows, cause columns: the ``M`` state
indicators followed by the ``N`` one-hot actions) and tabular generating
functions predicting whether an effect variable increased in the lag bin.
Learners for different lags share nothing but the read-only record list.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

ETA_CLAMP = 10.0
LAPLACE = 1.0
N_OUTCOMES = 2  # not increased / increased


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class InterventionRecord:
    """Cause snapshot at the trigger step plus the states that followed it.

    ``states[k]`` is the factored state ``k`` steps after the trigger;
    ``states[0]`` is the state the cause vector was built from.
    """

    intervened: str
    cause: np.ndarray
    states: np.ndarray

    @property
    def horizon(self) -> int:
        return len(self.states) - 1


def lag_bins(lags: Sequence[int]) -> list[tuple[int, int]]:
    """Half-open step windows ``(lo, hi]`` covered by each supported lag."""
    bins, lo = [], 0
    for tau in sorted(lags):
        bins.append((lo, tau))
        lo = tau
    return bins


def effect_matrix(records: Sequence[InterventionRecord], lo: int, hi: int):
    """Causes and increase indicators for one lag bin.

    Records that end before ``hi`` are dropped for this bin only.
    """
    keep = [r for r in records if r.horizon >= hi]
    if not keep:
        return np.zeros((0, 0), dtype=bool), np.zeros((0, 0), dtype=bool)
    causes = np.stack([r.cause for r in keep]).astype(bool)
    states = np.stack([r.states[lo:hi + 1] for r in keep]).astype(np.int64)
    rises = np.diff(states, axis=1) > 0
    return causes, rises.any(axis=1)


@dataclass
class GeneratingTable:
    """Conditional distribution of one effect given its parent configuration."""

    parents: tuple
    probs: np.ndarray  # (2 ** len(parents), N_OUTCOMES)

    def lookup(self, cause: np.ndarray) -> np.ndarray:
        idx = 0
        for bit, p in enumerate(self.parents):
            if cause[p]:
                idx |= 1 << bit
        return self.probs[idx]


def _config_index(causes: np.ndarray, parents: Sequence[int]) -> np.ndarray:
    if not len(parents):
        return np.zeros(len(causes), dtype=np.int64)
    weights = 1 << np.arange(len(parents), dtype=np.int64)
    return causes[:, list(parents)].astype(np.int64) @ weights


def _table_counts(causes, outcomes, parents) -> np.ndarray:
    n_cfg = 1 << len(parents)
    idx = _config_index(causes, parents) * N_OUTCOMES + outcomes.astype(np.int64)
    return np.bincount(idx, minlength=n_cfg * N_OUTCOMES).reshape(n_cfg, N_OUTCOMES).astype(float)


def _normalize(counts: np.ndarray, alpha: float = LAPLACE) -> np.ndarray:
    smoothed = counts + alpha
    return smoothed / smoothed.sum(axis=-1, keepdims=True)


def parents_of(graph: np.ndarray, effect: int) -> tuple:
    return tuple(int(j) for j in np.flatnonzero(graph[effect]))


def fit_generating(causes: np.ndarray, effects: np.ndarray, graph: np.ndarray,
                   alpha: float = LAPLACE) -> dict:
    """Laplace-smoothed maximum-likelihood tables for every effect row.

    Parent configurations never seen in the data get the uniform distribution.
    """
    tables = {}
    for i in range(graph.shape[0]):
        parents = parents_of(graph, i)
        counts = _table_counts(causes, effects[:, i], parents)
        tables[i] = GeneratingTable(parents, _normalize(counts, alpha))
    return tables


def nll(graph: np.ndarray, causes: np.ndarray, effects: np.ndarray,
        tables: dict | None = None) -> np.ndarray:
    """Per-effect negative log-likelihood of a batch (summed over records).

    ``tables`` default to ones fitted on the batch itself; supplied tables
    must have the parent sets implied by ``graph``.
    """
    if len(causes) == 0:
        raise ValueError("nll of an empty batch")
    if tables is None:
        tables = fit_generating(causes, effects, graph)
    out = np.zeros(graph.shape[0])
    for i in range(graph.shape[0]):
        table = tables[i]
        if table.parents != parents_of(graph, i):
            raise ValueError(f"table for effect {i} was fitted for other parents")
        idx = _config_index(causes, table.parents)
        p = table.probs[idx, effects[:, i].astype(np.int64)]
        out[i] = -np.log(p).sum()
    return out


def sample_graph(eta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli(sigmoid(eta)) draw of every adjacency entry."""
    return rng.random(eta.shape) < sigmoid(eta)


class CrossFitScorer:
    """Cross-fitted log-likelihood of each (effect, parent set) pair.

    Batch ``k`` is scored with tables fitted on all other batches, so adding
    a parent that does not generalize lowers the score. Results are memoized
    because the data is fixed for the lifetime of the scorer.
    """

    def __init__(self, batches: Sequence[tuple], alpha: float = LAPLACE,
                 scale: Sequence[float] | None = None):
        batches = [(np.asarray(c, bool), np.asarray(e, bool)) for c, e in batches if len(c)]
        self.n_batches = len(batches)
        if batches:
            self.causes = np.concatenate([c for c, _ in batches])
            self.effects = np.concatenate([e for _, e in batches])
            self.batch_id = np.concatenate(
                [np.full(len(c), k, dtype=np.int64) for k, (c, _) in enumerate(batches)])
        self.alpha = alpha
        # optional per-effect multiplier, e.g. 1 / (number of observed rises)
        self.scale = None if scale is None else np.asarray(scale, dtype=float)
        self._cache: dict = {}

    def __len__(self) -> int:
        return self.n_batches

    def loglik(self, effect: int, parents: tuple) -> float:
        key = (effect, parents)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        n_cfg = 1 << len(parents)
        cfg = _config_index(self.causes, parents)
        y = self.effects[:, effect].astype(np.int64)
        flat = (self.batch_id * n_cfg + cfg) * N_OUTCOMES + y
        counts = np.bincount(flat, minlength=self.n_batches * n_cfg * N_OUTCOMES)
        counts = counts.reshape(self.n_batches, n_cfg, N_OUTCOMES).astype(float)
        if self.n_batches > 1:
            train = counts.sum(axis=0, keepdims=True) - counts
        else:
            train = counts
        logp = np.log(_normalize(train, self.alpha))
        value = float((counts * logp).sum())
        if self.scale is not None:
            value *= float(self.scale[effect])
        self._cache[key] = value
        return value


def reinforce_gradient(eta_row: np.ndarray, graphs: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Score-function estimate of d E[score] / d eta_row with a mean baseline.

    Each sample's baseline is the mean score of the *other* samples, which
    keeps the estimator unbiased.
    """
    n = len(scores)
    if n < 2:
        raise ValueError("need at least two sampled graphs")
    baseline = (scores.sum() - scores) / (n - 1)
    centered = (scores - baseline)[:, None]
    return (centered * (graphs - sigmoid(eta_row)[None, :])).mean(axis=0)


@dataclass
class ScmTau:
    """Adjacency logits and generating tables for one lag."""

    tau: int
    n_effects: int
    n_causes: int
    eta: np.ndarray | None = None
    tables: dict = field(default_factory=dict)
    candidate_mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.eta is None:
            self.eta = np.zeros((self.n_effects, self.n_causes))
        if self.candidate_mask is None:
            mask = np.ones((self.n_effects, self.n_causes), dtype=bool)
            # an effect's own indicator is not a candidate cause
            diag = np.arange(min(self.n_effects, self.n_causes))
            mask[diag, diag] = False
            self.candidate_mask = mask

    def edge_probs(self) -> np.ndarray:
        return np.where(self.candidate_mask, sigmoid(self.eta), 0.0)

    def update_eta(self, scorer: CrossFitScorer, n_samples: int, rng: np.random.Generator,
                   lr: float = 0.1, sparsity: float = 0.0,
                   rows: Iterable[int] | None = None) -> np.ndarray:
        """One REINFORCE step on ``eta``; each effect row is scored separately.

        A graph's score for row ``i`` is the cross-fitted log-likelihood of
        effect ``i`` minus ``sparsity`` per selected parent.
        """
        if n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if len(scorer) == 0:
            return self.eta
        probs = sigmoid(self.eta)
        graphs = (rng.random((n_samples,) + self.eta.shape) < probs) & self.candidate_mask
        for i in range(self.n_effects) if rows is None else rows:
            sampled = graphs[:, i, :]
            scores = np.array([
                scorer.loglik(i, tuple(np.flatnonzero(g).tolist())) - sparsity * g.sum()
                for g in sampled
            ])
            grad = reinforce_gradient(self.eta[i], sampled.astype(float), scores)
            grad[~self.candidate_mask[i]] = 0.0
            self.eta[i] += lr * grad
        np.clip(self.eta, -ETA_CLAMP, ETA_CLAMP, out=self.eta)
        return self.eta

    def fit(self, causes: np.ndarray, effects: np.ndarray, threshold: float = 0.5) -> None:
        """Refit generating tables on the graph of accepted edges."""
        graph = self.edge_probs() > threshold
        self.tables = fit_generating(causes, effects, graph)

    def predict(self, effect: int, cause: np.ndarray) -> np.ndarray:
        table = self.tables.get(effect)
        if table is None:
            return np.full(N_OUTCOMES, 1.0 / N_OUTCOMES)
        return table.lookup(cause)


class Edge(NamedTuple):
    cause: int
    effect: int
    lag: int
    prob: float


def accepted_edges(eta: np.ndarray, tau: int, threshold: float = 0.5,
                   mask: np.ndarray | None = None) -> set:
    """Edges whose probability strictly exceeds ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    probs = sigmoid(eta)
    if mask is not None:
        probs = np.where(mask, probs, 0.0)
    rows, cols = np.nonzero(probs > threshold)
    return {Edge(int(j), int(i), tau, float(probs[i, j])) for i, j in zip(rows, cols)}


def prune_mediated(edges: Iterable[Edge], n_vars: int) -> set:
    """Drop cause->effect edges fully explained by a chain through a state variable.

    ``j -> i`` goes when some ``k`` has ``j -> k`` and ``k -> i`` and every
    accepted lag of ``j -> i`` is at least the sum of the shortest lags of the
    two hops.
    """
    edges = set(edges)
    min_lag: dict = {}
    for e in edges:
        key = (e.cause, e.effect)
        min_lag[key] = min(min_lag.get(key, e.lag), e.lag)
    drop = set()
    for (j, i), lag in min_lag.items():
        for k in range(n_vars):
            if k in (i, j):
                continue
            a, b = min_lag.get((j, k)), min_lag.get((k, i))
            if a is not None and b is not None and lag >= a + b:
                drop.add((j, i))
                break
    return {e for e in edges if (e.cause, e.effect) not in drop}


def parent_sets(edges: Iterable[Edge]) -> dict:
    """Effect variable -> set of cause indices over all lags."""
    out: dict = {}
    for e in edges:
        out.setdefault(e.effect, set()).add(e.cause)
    return out


def format_edges(edges: Iterable[Edge], cause_names: Sequence[str],
                 effect_names: Sequence[str]) -> str:
    lines = ["# cause effect lag probability"]
    for e in sorted(edges, key=lambda e: (e.effect, e.cause, e.lag)):
        lines.append(f"{cause_names[e.cause]} {effect_names[e.effect]} {e.lag} {e.prob:.6f}")
    return "\n".join(lines) + "\n"


def parse_edges(text: str, cause_names: Sequence[str], effect_names: Sequence[str]) -> set:
    cidx = {n: i for i, n in enumerate(cause_names)}
    eidx = {n: i for i, n in enumerate(effect_names)}
    out = set()
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        c, e, lag, prob = line.split()
        out.add(Edge(cidx[c], eidx[e], int(lag), float(prob)))
    return out
