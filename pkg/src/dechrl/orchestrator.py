"""Outer loop: intervene, discover per-lag structure, fit delays, grow and train the hierarchy."""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import delaydist as dd
from .empowerment import per_lag_cmi, softmax
from .hierarchy import NOOP, Hierarchy, HierarchySettings, PolicyUnit, SubGoal
from .scm import (CrossFitScorer, Edge, InterventionRecord, ScmTau, accepted_edges, effect_matrix,
                  format_edges, lag_bins, prune_mediated)
from .world import (ConfigError, TaskSpec, World, WorldConfig, discretize_delay, load_task_file,
                    subgoal_distance, task_spec)

log = logging.getLogger(__name__)

METRICS_VERSION = 1

# delay handling: where the delay used to read option outcomes comes from
LEARNED, FIXED, UNIFORM, NONE = "learned", "fixed", "uniform", "none"

VARIANTS = {
    # name: (delay mode, empowerment weight, option history, uses kappa)
    "dechrl": (LEARNED, 0.1, False, False),
    "dechrl_noemp": (LEARNED, 0.0, False, False),
    "prior_delay_distribution": (LEARNED, 0.0, False, False),
    "prior_fixed": (FIXED, 0.0, False, False),
    "prior_uniform": (UNIFORM, 0.0, False, False),
    "state_augmentation": (NONE, 0.0, True, False),
    "simplified": (LEARNED, 0.1, False, True),
}


class StagnationWarning(UserWarning):
    """Several rounds passed without new edges or promotions."""


@dataclass
class RunConfig:
    task: str = "GetSilverore"
    tau_max: int = 4
    sigma_delay: float = 0.4
    variant: str = "dechrl"
    kappa: int | None = None
    seed: int = 0
    rules_path: str | None = None
    episodes: int = 50000  # global budget: interventions plus policy training
    max_rounds: int = 8
    n_per_subgoal: int = 200
    eta_updates: int = 400
    eta_lr: float = 0.3
    n_graphs: int = 16
    sparsity: float = 0.3  # nats per observed rise of the effect
    cross_fit: int = 4
    edge_threshold: float = 0.5
    delay_k: int = 16
    delay_iterations: int = 100
    delay_lr: float = 0.05
    lam1: float = 0.05
    lam2: float = 0.05
    unit_episodes_per_round: int = 1500
    unit_episode_cap: int = 3000
    top_episodes_per_round: int = 1000
    final_evals: int = 100
    stagnation_rounds: int = 3

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        uses_kappa = VARIANTS[self.variant][3]
        if self.kappa is not None and not uses_kappa:
            raise ConfigError("kappa applies only to the simplified variant")
        if uses_kappa and self.kappa is None:
            self.kappa = 1
        if self.kappa is not None and not 1 <= self.kappa <= self.tau_max:
            raise ConfigError(f"kappa must lie in [1, tau_max], got {self.kappa}")
        if self.episodes < 1 or self.n_per_subgoal < 1 or self.max_rounds < 1:
            raise ConfigError("episodes, n_per_subgoal and max_rounds must be positive")

    @property
    def delay_mode(self) -> str:
        return VARIANTS[self.variant][0]

    @property
    def emp_weight(self) -> float:
        return VARIANTS[self.variant][1]

    @property
    def lags(self) -> list:
        return dd.support_lags(self.tau_max, self.kappa or 1)


@dataclass
class RoundState:
    index: int
    list_do: list
    edges: list
    beta: list
    success: dict
    episodes: int
    steps: int
    new_edges: int = 0
    promotions: int = 0
    seconds: dict = field(default_factory=dict)  # wall clock per phase; never written to logs


@dataclass
class RunResult:
    status: str
    rounds: list
    metrics: list
    final_success: list
    per_subgoal: dict
    beta: np.ndarray
    kl: np.ndarray | None
    edges: list
    columns: list = field(default_factory=list)

    @property
    def asr(self) -> float:
        return float(np.mean(self.final_success)) if self.final_success else 0.0


def build_spec(cfg: RunConfig) -> TaskSpec:
    if cfg.rules_path:
        return load_task_file(cfg.rules_path, cfg.tau_max, cfg.sigma_delay)
    return task_spec(cfg.task, cfg.tau_max, cfg.sigma_delay)


def true_delays(spec: TaskSpec, tau_max: int) -> np.ndarray:
    """Ground-truth delay distribution per variable (uniform where no rule exists)."""
    out = np.full((spec.n_vars, tau_max), 1.0 / tau_max)
    for r in spec.rules:
        out[r.effect] = discretize_delay(r.mu, r.sigma, tau_max)
    return out


def fixed_delays(spec: TaskSpec, tau_max: int) -> np.ndarray:
    """Each rule's configured mean rounded to a valid delay; tau_max where none."""
    out = np.full(spec.n_vars, tau_max, dtype=int)
    for r in spec.rules:
        out[r.effect] = min(max(int(np.floor(r.mu + 0.5)), 1), tau_max)
    return out


def kl_rows(true: np.ndarray, learned: np.ndarray, eps: float = 1e-9) -> np.ndarray:
    """KL(true || learned) per row with an ``eps`` floor on the learned mass."""
    if true.shape != learned.shape:
        raise ValueError(f"shape mismatch {true.shape} vs {learned.shape}")
    q = np.maximum(learned, eps)
    terms = np.where(true > 0, true * np.log(np.where(true > 0, true, 1.0) / q), 0.0)
    return terms.sum(axis=1)


def acyclic_edges(edges: Sequence[Edge], n_vars: int) -> list:
    """Keep edges greedily by probability, skipping any state edge that closes a cycle."""
    kept: list = []
    adj: dict = {}

    def reaches(a: int, b: int) -> bool:
        stack, seen = [a], set()
        while stack:
            v = stack.pop()
            if v == b:
                return True
            if v not in seen:
                seen.add(v)
                stack.extend(adj.get(v, ()))
        return False

    for e in sorted(edges, key=lambda e: (-e.prob, e.lag, e.effect, e.cause)):
        if e.cause < n_vars and e.cause != e.effect:
            if reaches(e.effect, e.cause):
                log.info("dropping edge %s to break a cycle", e)
                continue
            adj.setdefault(e.cause, set()).add(e.effect)
        kept.append(e)
    return sorted(kept, key=lambda e: (e.lag, e.effect, e.cause))


class Runner:
    """State of one seeded run; ``run_round`` advances it by one round."""

    def __init__(self, cfg: RunConfig, out: str | Path | None = None):
        self.cfg = cfg
        self.spec = build_spec(cfg)
        seeds = np.random.SeedSequence(cfg.seed).generate_state(4)
        horizon = 50 * cfg.tau_max

        def world(s: int) -> World:
            wc = WorldConfig(cfg.task, cfg.tau_max, cfg.sigma_delay, horizon, int(s), cfg.rules_path)
            return World(self.spec, wc)

        self.int_world, self.train_world, self.eval_world = world(seeds[0]), world(seeds[1]), world(seeds[2])
        self.rng = np.random.default_rng(int(seeds[3]))
        self.M, self.N = self.spec.n_vars, self.spec.n_actions
        if self.spec.actions[NOOP] != "noop":
            raise ConfigError("action 0 must be 'noop'")
        settings = HierarchySettings(
            tau_max=cfg.tau_max, emp_weight=cfg.emp_weight, unit_episodes=cfg.unit_episode_cap,
            history=cfg.tau_max if VARIANTS[cfg.variant][2] else 0)
        self.h = Hierarchy(self.M, self.N, self.spec.goal, settings, self.rng, self.spec.variables)
        self.lags = cfg.lags
        self.bins = lag_bins(self.lags)
        self.scms = {t: ScmTau(t, self.M, self.M + self.N) for t in self.lags}
        self.beta = self._prior_beta()
        self.records: list = []
        self.edges: list = []
        self.rounds: list = []
        self.metrics: list = []
        self.intervention_episodes = 0
        self.n_per_subgoal = cfg.n_per_subgoal
        self._stagnant = 0
        self._boosted = False
        self.true_p = true_delays(self.spec, cfg.tau_max)
        self.columns = ["episode", "variant", "seed", "success", "adc"] + \
            [f"kl_{v}" for v in self.spec.variables]
        self.out = Path(out) if out is not None else None
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
            (self.out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True))
            with open(self.out / "metrics.csv", "w", encoding="utf-8") as fh:
                fh.write(f"# dechrl metrics v{METRICS_VERSION}\n")
                fh.write(",".join(self.columns) + "\n")
        self._apply_delays()

    # bookkeeping ----------------------------------------------------------

    @property
    def episodes_used(self) -> int:
        return self.intervention_episodes + self.h.episodes_used

    def budget_left(self) -> int:
        return self.cfg.episodes - self.episodes_used

    def _prior_beta(self) -> np.ndarray:
        beta = np.zeros((self.M, self.cfg.tau_max))
        return dd.restrict_support(beta, self.cfg.kappa) if self.cfg.kappa else beta

    def delay_probs(self) -> np.ndarray:
        return dd.delay_distribution(self.beta)

    def kl(self) -> np.ndarray | None:
        if self.cfg.delay_mode != LEARNED:
            return None
        return kl_rows(self.true_p, self.delay_probs())

    def _apply_delays(self) -> None:
        """Delay distribution the hierarchy reads option outcomes with."""
        mode, tau = self.cfg.delay_mode, self.cfg.tau_max
        if mode == LEARNED:
            probs = self.delay_probs()
        else:
            if mode == FIXED:
                at = fixed_delays(self.spec, tau)
            elif mode == UNIFORM:
                at = np.full(self.M, tau)
            else:  # no delay model: read the next state right away
                at = np.ones(self.M, dtype=int)
            probs = dd.delay_distribution(dd.point_mass(at, tau))
        self.h.delays = probs

    def _row(self, success: bool, final_state: tuple) -> dict:
        row = {"episode": self.episodes_used, "variant": self.cfg.variant, "seed": self.cfg.seed,
               "success": int(success), "adc": subgoal_distance(self.spec, final_state)}
        kl = self.kl()
        for i, v in enumerate(self.spec.variables):
            row[f"kl_{v}"] = "" if kl is None else f"{kl[i]:.6f}"
        return row

    def _emit(self, row: dict) -> None:
        self.metrics.append(row)
        if self.out is not None:
            with open(self.out / "metrics.csv", "a", encoding="utf-8") as fh:
                fh.write(",".join(str(row[c]) for c in self.columns) + "\n")

    # interventions --------------------------------------------------------

    def _settle(self, world: World) -> None:
        """Let in-flight effects land so the cause snapshot is not confounded."""
        for _ in range(self.cfg.tau_max):
            if not world.pending or world.done:
                return
            world.step(NOOP)

    def _record(self, world: World, probe: int, target) -> InterventionRecord | None:
        if world.done:
            return None
        s0 = world.state
        cause = np.concatenate([np.asarray(s0) > 0, np.eye(self.N, dtype=bool)[probe]])
        states = [s0]
        world.step(probe)
        states.append(world.state)
        for _ in range(self.cfg.tau_max - 1):
            if world.done:
                break
            world.step(NOOP)
            states.append(world.state)
        label = target.label(self.spec.variables) if isinstance(target, SubGoal) else self.spec.actions[target]
        return InterventionRecord(label, cause, np.asarray(states, dtype=np.int64))

    def collect_interventions(self, n_per_subgoal: int) -> list:
        """One record per successful intervention on each element of ``list_do``."""
        world, h, rng = self.int_world, self.h, self.rng
        prefixable = [o for o in h.list_do if isinstance(o, SubGoal) and o.up]
        out = []
        for target in list(h.list_do):
            for _ in range(n_per_subgoal):
                if self.budget_left() <= 0:
                    return out
                self.intervention_episodes += 1
                world.reset()
                pool = [o for o in prefixable if o != target]
                if pool:
                    k = int(rng.integers(0, len(pool) + 1))
                    for j in rng.permutation(len(pool))[:k]:
                        unit = h.units[pool[j]]
                        h.execute(world, unit, min(h.budget(unit), world.horizon - world.t), True)
                if isinstance(target, int):
                    probe = target
                else:
                    unit = h.units[target]
                    _, ok, _ = h.execute(world, unit, min(h.budget(unit), world.horizon - world.t), True)
                    if not ok:
                        continue
                    probe = int(rng.integers(self.N))
                self._settle(world)
                rec = self._record(world, probe, target)
                if rec is not None:
                    out.append(rec)
        return out

    # discovery ------------------------------------------------------------

    def fit_structure(self) -> list:
        cfg = self.cfg
        _, rises = effect_matrix(self.records, 0, cfg.tau_max)
        counts = rises.sum(axis=0) if len(rises) else np.zeros(self.M)
        active = [int(i) for i in np.flatnonzero(counts)]  # no rises, nothing to explain
        n_rises = np.maximum(counts, 1)
        edges: list = []
        for (lo, hi), tau in zip(self.bins, self.lags):
            causes, effects = effect_matrix(self.records, lo, hi)
            if len(causes) < cfg.cross_fit:
                continue
            parts = np.array_split(np.arange(len(causes)), cfg.cross_fit)
            scorer = CrossFitScorer([(causes[p], effects[p]) for p in parts], scale=1.0 / n_rises)
            # refit from the uninformative prior on all records gathered so far,
            # so edges rejected on scarce early data can still be accepted later
            scm = self.scms[tau] = ScmTau(tau, self.M, self.M + self.N)
            for _ in range(cfg.eta_updates):
                scm.update_eta(scorer, cfg.n_graphs, self.rng, lr=cfg.eta_lr, sparsity=cfg.sparsity,
                               rows=active)
            scm.fit(causes, effects, cfg.edge_threshold)
            edges += accepted_edges(scm.eta, tau, cfg.edge_threshold, scm.candidate_mask)
        edges = sorted(prune_mediated(edges, self.M), key=lambda e: (e.lag, e.effect, e.cause))
        return acyclic_edges(edges, self.M)

    def fit_delays(self) -> None:
        cfg = self.cfg
        if cfg.delay_mode != LEARNED:
            return
        parents: dict = {}
        for e in self.edges:
            parents.setdefault(e.effect, set()).add(e.cause)
        evidence = dd.lag_evidence(self.scms, self.M, cfg.tau_max,
                                   {i: parents.get(i, set()) for i in range(self.M)})
        self.beta = dd.train_delay(self._prior_beta(), evidence, cfg.delay_k, cfg.delay_iterations,
                                   self.rng, cfg.delay_lr, cfg.lam1, cfg.lam2)

    # empowerment ----------------------------------------------------------

    def _emp_fn(self):
        lags = np.asarray(self.lags) - 1
        probs = self.delay_probs()
        cache: dict = {}
        eye = np.eye(self.N, dtype=bool)

        def tables(unit: PolicyUnit, bstate: tuple) -> np.ndarray:
            key = (unit.goal.var, tuple(unit.options), bstate)
            f = cache.get(key)
            if f is None:
                f = np.empty((len(self.lags), len(unit.options), 2))
                base = np.asarray(bstate, dtype=bool)
                for j, opt in enumerate(unit.options):
                    if isinstance(opt, int):
                        cause = np.concatenate([base, eye[opt]])
                    else:
                        s = base.copy()
                        s[opt.var] = opt.up
                        cause = np.concatenate([s, eye[NOOP]])
                    for t, tau in enumerate(self.lags):
                        f[t, j] = self.scms[tau].predict(unit.goal.var, cause)
                cache[key] = f
            return f

        def emp(unit: PolicyUnit, state: tuple) -> float:
            bstate = tuple(v > 0 for v in state)
            avail = self.h.available(unit)
            f = tables(unit, bstate)[:, avail]
            key = self.h.key(unit, state)
            pi = softmax(unit.logits(key)[avail])
            w = probs[unit.goal.var, lags]
            w = w / w.sum()
            return float(w @ per_lag_cmi(pi, f))

        return emp

    # rounds ---------------------------------------------------------------

    def run_round(self) -> RoundState:
        cfg, h = self.cfg, self.h
        r = len(self.rounds)
        clock = [time.perf_counter()]
        seconds = {}

        def lap(name: str) -> None:
            clock.append(time.perf_counter())
            seconds[name] = clock[-1] - clock[-2]

        self.records += self.collect_interventions(self.n_per_subgoal)
        lap("interventions")
        before = {(e.cause, e.effect) for e in self.edges}
        self.edges = self.fit_structure()
        new_edges = len({(e.cause, e.effect) for e in self.edges} - before)
        lap("structure")
        self.fit_delays()
        self._apply_delays()
        lap("delays")
        if self.edges:
            h.build_round(self.edges)
        promoted_before = sum(u.promoted for u in h.units.values())
        emp = self._emp_fn() if cfg.emp_weight else None
        order = sorted(h.units.values(), key=lambda u: (u.level, not u.goal.up, u.goal.var))
        for unit in order:
            if unit.promoted or unit.episodes >= cfg.unit_episode_cap:
                continue
            n = min(cfg.unit_episodes_per_round, cfg.unit_episode_cap - unit.episodes)
            h.train_unit(unit, self.train_world, self.eval_world, n, emp, budget_left=self.budget_left)
        h.train_unit(h.top, self.train_world, self.eval_world, cfg.top_episodes_per_round, emp,
                     on_eval=lambda u, ok, s: self._emit(self._row(ok, s)),
                     budget_left=self.budget_left)
        lap("policy")
        promotions = sum(u.promoted for u in h.units.values()) - promoted_before
        state = RoundState(r, [h._opt_label(o) for o in h.list_do],
                           [tuple(e) for e in self.edges], self.delay_probs().tolist(),
                           {u.goal.label(self.spec.variables): u.success_ratio for u in h.units.values()},
                           self.episodes_used, sum(len(rec.states) for rec in self.records),
                           new_edges, promotions, seconds)
        self.rounds.append(state)
        self._check_stagnation(state)
        self._write_round(state)
        return state

    def task_done(self) -> bool:
        """The task subgoal's own unit and the top policy are both promoted."""
        unit = self.h.units.get(SubGoal(self.spec.goal, True))
        return unit is not None and unit.promoted and self.h.top.promoted

    def _check_stagnation(self, state: RoundState) -> None:
        if state.new_edges or state.promotions or self.task_done():
            self._stagnant = 0
            return
        self._stagnant += 1
        if self._stagnant >= self.cfg.stagnation_rounds:
            warnings.warn(f"{self._stagnant} rounds without new edges or promotions",
                          StagnationWarning, stacklevel=2)
            if not self._boosted:
                self.n_per_subgoal *= 2
                self._boosted = True

    def _write_round(self, state: RoundState) -> None:
        if self.out is None:
            return
        r = state.index
        names = list(self.spec.variables) + list(self.spec.actions)
        (self.out / f"round_{r:02d}_edges.txt").write_text(
            format_edges(self.edges, names, self.spec.variables))
        (self.out / f"round_{r:02d}_beta.csv").write_text(
            dd.format_csv(self.delay_probs(), self.spec.variables))
        (self.out / f"round_{r:02d}_hierarchy.json").write_text(self.h.dumps())

    def finish(self, status: str) -> RunResult:
        h = self.h
        finals = []
        for _ in range(self.cfg.final_evals):
            ok, s = h.evaluate(self.eval_world, h.top)
            finals.append(ok)
            self._emit(self._row(ok, s))
        per_subgoal = {}
        for v, name in enumerate(self.spec.variables):
            unit = h.units.get(SubGoal(v, True))
            if unit is None:
                per_subgoal[name] = 0.0
                continue
            wins = [h.evaluate(self.eval_world, unit)[0] for _ in range(self.cfg.final_evals)]
            per_subgoal[name] = float(np.mean(wins))
        if self.out is not None:
            summary = {"status": status, "asr": float(np.mean(finals)),
                       "adc": float(np.mean([m["adc"] for m in self.metrics[-len(finals):]])),
                       "per_subgoal": per_subgoal, "rounds": len(self.rounds),
                       "episodes": self.episodes_used}
            (self.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        return RunResult(status, self.rounds, self.metrics, finals, per_subgoal,
                         self.delay_probs(), self.kl(), list(self.edges), self.columns)


def run(cfg: RunConfig, out: str | Path | None = None) -> RunResult:
    """Loop rounds until the top policy is promoted, rounds run out or the budget is spent."""
    runner = Runner(cfg, out)
    status = "partial"
    for _ in range(cfg.max_rounds):
        runner.run_round()
        if runner.task_done():
            status = "complete"
            break
        if runner.budget_left() <= 0:
            log.warning("episode budget exhausted after %d rounds", len(runner.rounds))
            break
    return runner.finish(status)
