"""Factored crafting worlds whose transitions land after stochastic integer delays.

A world is a set of hidden :class:`CausalRule` objects over ``M`` count
variables and ``N`` primitive actions. When a rule's parent conditions hold at
step ``t`` its resources are consumed at once and its effect is scheduled for
step ``t + tau`` with ``tau`` drawn from a discretized Gaussian.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

COUNT_CAP = 255

# A factored state is a tuple of non-negative integer counts, one per variable.
FactoredState = tuple


class ConfigError(ValueError):
    """Invalid world, task or rule configuration."""


class EpisodeFinished(RuntimeError):
    """Raised when stepping a world past its episode horizon."""


def discretize_delay(mu: float, sigma: float, tau_max: int) -> np.ndarray:
    """Categorical distribution over delays ``1..tau_max``.

    Each delay gets the N(mu, sigma^2) mass on ``[tau - 0.5, tau + 0.5]``; the
    result is renormalized over the truncated support. ``sigma == 0`` gives a
    point mass at ``clamp(round(mu), 1, tau_max)``.
    """
    if tau_max < 1:
        raise ConfigError(f"tau_max must be >= 1, got {tau_max}")
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    probs = np.zeros(tau_max)
    if sigma > 0:
        def cdf(x: float) -> float:
            return 0.5 * (1.0 + math.erf((x - mu) / (sigma * math.sqrt(2.0))))

        for tau in range(1, tau_max + 1):
            probs[tau - 1] = cdf(tau + 0.5) - cdf(tau - 0.5)
        total = probs.sum()
        if total > 0:
            return probs / total
    # degenerate Gaussian, or all mass outside the support
    idx = min(max(int(math.floor(mu + 0.5)), 1), tau_max)
    probs[:] = 0.0
    probs[idx - 1] = 1.0
    return probs


@dataclass(frozen=True)
class CausalRule:
    """Parent conditions -> delayed effect increment.

    ``state_parents`` maps variable index to the minimum count required;
    ``actions`` is the set of action indices any of which triggers the rule
    (empty means the rule fires on state alone).
    """

    effect: int
    state_parents: dict = field(default_factory=dict)
    actions: frozenset = frozenset()
    consume: dict = field(default_factory=dict)
    delta: int = 1
    mu: float = 1.0
    sigma: float = 0.0

    def satisfied(self, state: Sequence[int], action: int) -> bool:
        if self.actions and action not in self.actions:
            return False
        for var, need in self.state_parents.items():
            if state[var] < need:
                return False
        return True


@dataclass(frozen=True)
class PendingEffect:
    fire_step: int
    effect: int
    delta: int
    trigger_step: int


@dataclass
class WorldConfig:
    task_name: str = "GetSilverore"
    tau_max: int = 4
    sigma_delay: float = 0.4
    episode_horizon: int | None = None
    rng_seed: int = 0
    rules_path: str | None = None

    def __post_init__(self) -> None:
        if self.tau_max < 1:
            raise ConfigError("tau_max must be >= 1")
        if self.sigma_delay < 0:
            raise ConfigError("sigma_delay must be >= 0")
        if self.episode_horizon is None:
            self.episode_horizon = 50 * self.tau_max
        if self.episode_horizon <= self.tau_max:
            raise ConfigError("episode_horizon must exceed tau_max")


@dataclass(frozen=True)
class TaskSpec:
    """Variables, actions and hidden rules of one task."""

    name: str
    variables: tuple
    actions: tuple
    rules: tuple
    goal: int

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    @property
    def n_actions(self) -> int:
        return len(self.actions)


# Rule tables for the built-in tasks. Each entry:
# (effect, {parent: min_count}, [trigger actions], {consumed: amount}, mean delay at tau_max=4)
_BUILTIN = {
    "GetSilverore": {
        "variables": ["wood", "stone", "stick", "stonepickaxe", "silverore"],
        "actions": ["noop", "collect_wood", "collect_stone", "craft_stick",
                    "craft_stonepickaxe", "mine_silverore"],
        "goal": "silverore",
        "rules": [
            ("wood", {}, ["collect_wood"], {}, 2),
            ("stone", {}, ["collect_stone"], {}, 2),
            ("stick", {"wood": 1}, ["craft_stick"], {"wood": 1}, 3),
            ("stonepickaxe", {"stone": 1, "stick": 1}, ["craft_stonepickaxe"],
             {"stone": 1, "stick": 1}, 4),
            ("silverore", {"stonepickaxe": 1}, ["mine_silverore"], {}, 3),
        ],
    },
    "GetIron": {
        "variables": ["wood", "stone", "stick", "stoneaxe", "ironore", "coal", "iron"],
        "actions": ["noop", "collect_wood", "collect_stone", "craft_stick",
                    "craft_stoneaxe", "mine_ironore", "mine_coal", "smelt_iron"],
        "goal": "iron",
        "rules": [
            ("wood", {}, ["collect_wood"], {}, 2),
            ("stone", {}, ["collect_stone"], {}, 2),
            ("stick", {"wood": 1}, ["craft_stick"], {"wood": 1}, 3),
            ("stoneaxe", {"stone": 1, "stick": 1}, ["craft_stoneaxe"],
             {"stone": 1, "stick": 1}, 4),
            ("ironore", {"stoneaxe": 1}, ["mine_ironore"], {}, 3),
            ("coal", {"stoneaxe": 1}, ["mine_coal"], {}, 2),
            ("iron", {"ironore": 1, "coal": 1}, ["smelt_iron"],
             {"ironore": 1, "coal": 1}, 4),
        ],
    },
    "Fire2Burn": {
        "variables": ["key", "door_open", "match", "fire", "burned"],
        "actions": ["noop", "pickup_key", "toggle_door", "pickup_match",
                    "strike_match", "burn"],
        "goal": "burned",
        "rules": [
            ("key", {}, ["pickup_key"], {}, 1),
            ("door_open", {"key": 1}, ["toggle_door"], {"key": 1}, 2),
            ("match", {"door_open": 1}, ["pickup_match"], {}, 2),
            ("fire", {"match": 1}, ["strike_match"], {"match": 1}, 3),
            ("burned", {"fire": 1}, ["burn"], {"fire": 1}, 2),
        ],
    },
    "Wood2Wet": {
        "variables": ["wood", "bucket", "water", "wet_wood"],
        "actions": ["noop", "pickup_wood", "pickup_bucket", "fill_bucket", "pour"],
        "goal": "wet_wood",
        "rules": [
            ("wood", {}, ["pickup_wood"], {}, 2),
            ("bucket", {}, ["pickup_bucket"], {}, 1),
            ("water", {"bucket": 1}, ["fill_bucket"], {}, 3),
            ("wet_wood", {"wood": 1, "water": 1}, ["pour"],
             {"wood": 1, "water": 1}, 4),
        ],
    },
}

TASK_NAMES = tuple(_BUILTIN)


def _scaled_mu(mu4: float, tau_max: int) -> float:
    """Built-in means are stated for tau_max=4 and scale with the horizon."""
    scaled = math.floor(mu4 * tau_max / 4.0 + 0.5)
    return float(min(max(scaled, 1), tau_max))


def _build_spec(name: str, table: dict, tau_max: int, sigma: float,
                scale_mu: bool) -> TaskSpec:
    variables = tuple(table["variables"])
    actions = tuple(table["actions"])
    vidx = {v: i for i, v in enumerate(variables)}
    aidx = {a: i for i, a in enumerate(actions)}
    rules = []
    try:
        for entry in table["rules"]:
            if isinstance(entry, dict):
                effect, parents = entry["effect"], entry.get("parents", {})
                acts, consume = entry.get("actions", []), entry.get("consume", {})
                mu = entry["mu"]
                rule_sigma = entry.get("sigma", sigma)
                delta = entry.get("delta", 1)
            else:
                effect, parents, acts, consume, mu = entry
                rule_sigma, delta = sigma, 1
            if scale_mu:
                mu = _scaled_mu(mu, tau_max)
            rules.append(CausalRule(
                effect=vidx[effect],
                state_parents={vidx[p]: int(c) for p, c in parents.items()},
                actions=frozenset(aidx[a] for a in acts),
                consume={vidx[p]: int(c) for p, c in consume.items()},
                delta=int(delta),
                mu=float(mu),
                sigma=float(rule_sigma),
            ))
        goal = vidx[table["goal"]]
    except KeyError as exc:
        raise ConfigError(f"unknown variable or action {exc} in task {name!r}") from None
    spec = TaskSpec(name, variables, actions, tuple(rules), goal)
    validate_rules(spec, tau_max)
    return spec


def validate_rules(spec: TaskSpec, tau_max: int) -> None:
    """Check delay bounds, per-effect delay consistency and acyclicity."""
    delays: dict[int, tuple] = {}
    for rule in spec.rules:
        rounded = math.floor(rule.mu + 0.5)
        if not 1 <= rounded <= tau_max:
            raise ConfigError(
                f"rule for {spec.variables[rule.effect]} has mean delay {rule.mu}"
                f" outside [1, {tau_max}]")
        if rule.sigma < 0:
            raise ConfigError("rule sigma must be >= 0")
        key = (rule.mu, rule.sigma)
        if delays.setdefault(rule.effect, key) != key:
            raise ConfigError(
                f"rules for {spec.variables[rule.effect]} disagree on their delay")
    graph = {i: set() for i in range(spec.n_vars)}
    for rule in spec.rules:
        graph[rule.effect].update(rule.state_parents)
    if not _is_acyclic(graph):
        raise ConfigError(f"rule graph of task {spec.name!r} has a cycle")


def _is_acyclic(parents: dict) -> bool:
    state = {}

    def visit(node) -> bool:
        mark = state.get(node)
        if mark == 1:
            return False
        if mark == 2:
            return True
        state[node] = 1
        ok = all(visit(p) for p in parents.get(node, ()))
        state[node] = 2
        return ok

    return all(visit(n) for n in list(parents))


def load_task_file(path: str | Path, tau_max: int, sigma: float) -> TaskSpec:
    """Read a task definition from JSON (schema in the README)."""
    with open(path, encoding="utf-8") as fh:
        table = json.load(fh)
    for key in ("variables", "actions", "rules", "goal"):
        if key not in table:
            raise ConfigError(f"task file {path} lacks {key!r}")
    return _build_spec(table.get("name", Path(path).stem), table, tau_max, sigma,
                       scale_mu=False)


def task_spec(name: str, tau_max: int, sigma: float) -> TaskSpec:
    if name not in _BUILTIN:
        raise ConfigError(f"unknown task {name!r}; choose from {', '.join(TASK_NAMES)}")
    return _build_spec(name, _BUILTIN[name], tau_max, sigma, scale_mu=True)


def chain_depth(spec: TaskSpec, var: int | None = None) -> int:
    """Longest rule chain ending at ``var`` (default: the goal); roots count 1."""
    producers: dict[int, list] = {}
    for rule in spec.rules:
        producers.setdefault(rule.effect, []).append(rule)
    memo: dict[int, int] = {}

    def depth(v: int) -> int:
        if v not in memo:
            best = 0
            for rule in producers.get(v, ()):
                best = max(best, 1 + max((depth(p) for p in rule.state_parents), default=0))
            memo[v] = best
        return memo[v]

    return depth(spec.goal if var is None else var)


def subgoal_distance(spec: TaskSpec, state: Sequence[int], var: int | None = None) -> int:
    """Unachieved variables on the cheapest rule path to ``var`` (default: goal).

    A variable with a positive count costs nothing; otherwise it costs one plus
    the cheapest rule's unmet state parents, counted once each.
    """
    target = spec.goal if var is None else var
    by_effect: dict = {}
    for r in spec.rules:
        by_effect.setdefault(r.effect, []).append(r)

    def needed(v: int, stack: frozenset) -> frozenset:
        if state[v] > 0:
            return frozenset()
        best = None
        for r in by_effect.get(v, ()):
            if any(p in stack for p in r.state_parents):
                continue
            req = frozenset({v})
            for p in r.state_parents:
                req |= needed(p, stack | {v})
            if best is None or len(req) < len(best):
                best = req
        return frozenset({v}) if best is None else best

    return len(needed(target, frozenset()))


class World:
    """One delayed factored environment instance.

    The world owns its RNG; two worlds built from equal configs and driven by
    equal action sequences produce identical trajectories.
    """

    def __init__(self, spec: TaskSpec, config: WorldConfig):
        self.spec = spec
        self.config = config
        self.tau_max = config.tau_max
        self.horizon = config.episode_horizon
        self._rng = random.Random(config.rng_seed)
        self._cdfs = {}
        for rule in spec.rules:
            if rule.effect not in self._cdfs:
                probs = discretize_delay(rule.mu, rule.sigma, self.tau_max)
                self._cdfs[rule.effect] = np.cumsum(probs).tolist()
        self._rules = spec.rules
        self.reset()

    @property
    def n_vars(self) -> int:
        return self.spec.n_vars

    @property
    def n_actions(self) -> int:
        return self.spec.n_actions

    @property
    def state(self) -> FactoredState:
        return tuple(self._state)

    @property
    def done(self) -> bool:
        return self.t >= self.horizon

    def reset(self, state: Iterable[int] | None = None) -> FactoredState:
        self._state = [0] * self.spec.n_vars if state is None else [int(v) for v in state]
        self.t = 0
        self.pending: list[PendingEffect] = []
        # per-variable step indices at which the count rose / fell this episode
        self.increases: list[list[int]] = [[] for _ in range(self.spec.n_vars)]
        self.decreases: list[list[int]] = [[] for _ in range(self.spec.n_vars)]
        self.trajectory: list[FactoredState] = [self.state]  # trajectory[t] is the state at step t
        return self.state

    def sample_delay(self, effect: int) -> int:
        u = self._rng.random()
        cdf = self._cdfs[effect]
        for i, c in enumerate(cdf):
            if u < c:
                return i + 1
        return len(cdf)

    def step(self, action: int) -> tuple[FactoredState, int]:
        if self.t >= self.horizon:
            raise EpisodeFinished(f"episode ended at step {self.horizon}")
        if not 0 <= action < self.spec.n_actions:
            raise ConfigError(f"action {action} out of range")
        s = self._state
        before = list(s)
        for rule in self._rules:
            if rule.satisfied(s, action):
                for var, amount in rule.consume.items():
                    s[var] = max(s[var] - amount, 0)
                tau = self.sample_delay(rule.effect)
                self.pending.append(PendingEffect(self.t + tau, rule.effect, rule.delta, self.t))
        self.t += 1
        if self.pending:
            keep = []
            for pe in self.pending:
                if pe.fire_step == self.t:
                    s[pe.effect] = min(max(s[pe.effect] + pe.delta, 0), COUNT_CAP)
                else:
                    keep.append(pe)
            self.pending = keep
        for var in range(len(s)):
            if s[var] > before[var]:
                self.increases[var].append(self.t)
            elif s[var] < before[var]:
                self.decreases[var].append(self.t)
        out = tuple(s)
        self.trajectory.append(out)
        return out, self.t

    def achieved_vars(self) -> set:
        """Variables whose count rose at least once this episode."""
        return {v for v, steps in enumerate(self.increases) if steps}


def make_task(config: WorldConfig) -> World:
    if config.rules_path:
        spec = load_task_file(config.rules_path, config.tau_max, config.sigma_delay)
    else:
        spec = task_spec(config.task_name, config.tau_max, config.sigma_delay)
    return World(spec, config)
