"""Subgoal hierarchy: per-effect option policies trained with Q-learning and HER.

Each controllable effect variable ``v`` gets two units, one for ``v`` rising
and one for ``v`` falling. A unit's options are the primitive actions plus the
rise/fall subgoals of its causal parents; invoking a subgoal option runs the
owning unit recursively. Units act at every step; the outcome of each
decision, used for learning, is read after a delay drawn from the delay
distribution of the unit's goal variable.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, Union

import numpy as np

from .empowerment import advantage_update, normalize_advantages, softmax
from .world import World

NOOP = 0
PROMOTION_THRESHOLD = 0.5
MIN_EVALS = 100
EVAL_EVERY = 10
THETA_CLAMP = 1.0


@dataclass(frozen=True, order=True)
class SubGoal:
    var: int
    up: bool = True

    def label(self, names: Sequence[str] | None = None) -> str:
        name = names[self.var] if names is not None else str(self.var)
        return f"{name}{'+' if self.up else '-'}"


Option = Union[int, SubGoal]


class StructureError(ValueError):
    """Accepted edges do not form a usable hierarchy."""


class OptionError(KeyError):
    """Option requested that is not in the unit's option space."""


@dataclass
class HierarchySettings:
    tau_max: int
    gamma: float = 0.95
    alpha: float = 0.1
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.3
    unit_episodes: int = 3000  # annealing horizon and per-unit training cap
    budget_per_level: int | None = None  # defaults to 4 * tau_max
    emp_weight: float = 0.1
    emp_lr: float = 1.0
    replay_size: int = 20000
    replay_batch: int = 32
    history: int = 0  # >0 appends the last options taken to the state key

    def __post_init__(self) -> None:
        if self.budget_per_level is None:
            self.budget_per_level = 4 * self.tau_max


@dataclass
class Transition:
    state: tuple
    key: tuple
    option: int
    reward: float
    next_state: tuple
    next_key: tuple
    achieved: frozenset
    done: bool


@dataclass
class PolicyUnit:
    goal: SubGoal
    options: list
    key_vars: tuple
    level: int
    is_top: bool = False
    q: dict = field(default_factory=dict)
    theta: dict = field(default_factory=dict)
    replay: list = field(default_factory=list)
    evals: deque = field(default_factory=lambda: deque(maxlen=MIN_EVALS))
    n_evals: int = 0
    episodes: int = 0
    promoted: bool = False

    @property
    def success_ratio(self) -> float:
        return float(np.mean(self.evals)) if self.evals else 0.0

    def index(self, option: Option) -> int:
        try:
            return self.options.index(option)
        except ValueError:
            raise OptionError(f"{option!r} not in option space") from None

    def values(self, key: tuple) -> np.ndarray:
        row = self.q.get(key)
        if row is None:
            row = self.q[key] = np.zeros(len(self.options))
        return row

    def logits(self, key: tuple) -> np.ndarray:
        row = self.theta.get(key)
        if row is None:
            row = self.theta[key] = np.zeros(len(self.options))
        return row

    def reset(self) -> None:
        """Forget learned values and statistics after a structural change."""
        self.q.clear()
        self.theta.clear()
        self.replay.clear()
        self.evals.clear()
        self.n_evals = 0
        self.episodes = 0

    def resize(self, options: list) -> None:
        """Adopt a larger option space, keeping learned values for old options."""
        if options == self.options:
            return
        old = {o: i for i, o in enumerate(self.options)}
        keep = [(j, old[o]) for j, o in enumerate(options) if o in old]
        for table in (self.q, self.theta):
            for key, row in table.items():
                new = np.zeros(len(options))
                for j, i in keep:
                    new[j] = row[i]
                table[key] = new
        remap = dict((i, j) for j, i in keep)
        self.replay = [t for t in self.replay if t.option in remap]
        for t in self.replay:
            t.option = remap[t.option]
        self.options = list(options)


def should_promote(success_ratio: float, n_evals: int) -> bool:
    """Strictly above one half, measured over at least 100 evaluations."""
    return n_evals >= MIN_EVALS and success_ratio > PROMOTION_THRESHOLD


def state_parents(edges: Iterable, n_vars: int) -> dict:
    """Effect -> set of state-variable parents; action causes are dropped."""
    out: dict = {}
    for e in edges:
        out.setdefault(e.effect, set())
        if e.cause < n_vars:
            out[e.effect].add(e.cause)
    return out


def levels(parents: dict) -> dict:
    """Hierarchy level per effect: 1 for action-only parents, else 1 + max parent level."""
    memo: dict = {}

    def level(v: int, stack: tuple = ()) -> int:
        if v in stack:
            raise StructureError(f"cyclic parent structure through variable {v}")
        if v not in memo:
            ps = [p for p in parents.get(v, ()) if p in parents]
            memo[v] = 1 + max((level(p, stack + (v,)) for p in ps), default=0)
        return memo[v]

    for v in parents:
        level(v)
    return memo


def option_spaces(parents: dict, n_actions: int) -> dict:
    """Omega for every effect subgoal: actions plus parents' rise and fall subgoals."""
    levels(parents)  # raises on cycles
    out = {}
    for v in sorted(parents):
        opts: list = list(range(n_actions))
        for p in sorted(parents[v]):
            if p in parents:
                opts += [SubGoal(p, True), SubGoal(p, False)]
        out[SubGoal(v, True)] = opts
        out[SubGoal(v, False)] = list(opts)
    return out


def top_options(parents: dict, list_do: Iterable, n_actions: int) -> list:
    """Primitive actions, promoted subgoals and every effect subgoal, deduplicated."""
    subs = {o for o in list_do if isinstance(o, SubGoal)}
    for v in parents:
        subs |= {SubGoal(v, True), SubGoal(v, False)}
    return list(range(n_actions)) + sorted(subs)


def her_relabel(transitions: Sequence[Transition], goal: SubGoal) -> dict:
    """Original transitions plus one hindsight copy per other achieved subgoal.

    Returns ``{goal: originals, other: relabeled, ...}``. A relabeled copy
    keeps the transitions up to the first achievement of ``other``, with
    reward 1 and termination at that step.
    """
    out = {goal: list(transitions)}
    first: dict = {}
    for i, t in enumerate(transitions):
        for g in t.achieved:
            first.setdefault(g, i)
    for g, i in sorted(first.items()):
        if g == goal:
            continue
        out[g] = [
            Transition(t.state, t.key, t.option, float(j == i), t.next_state, t.next_key,
                       t.achieved, j == i)
            for j, t in enumerate(transitions[:i + 1])
        ]
    return out


class Hierarchy:
    """Units, option spaces and the set of controllable options (``list_do``)."""

    def __init__(self, n_vars: int, n_actions: int, goal_var: int, settings: HierarchySettings,
                 rng: np.random.Generator, var_names: Sequence[str] | None = None):
        self.n_vars = n_vars
        self.n_actions = n_actions
        self.goal_var = goal_var
        self.settings = settings
        self.rng = rng
        self.var_names = list(var_names) if var_names is not None else None
        self.parents: dict = {}
        self.units: dict = {}
        self.list_do: list = list(range(n_actions))
        # per-variable distribution of the delay after which an option's outcome is read
        self.delays = np.zeros((n_vars, settings.tau_max))
        self.delays[:, -1] = 1.0
        self.episodes_used = 0
        self.top = PolicyUnit(SubGoal(goal_var, True), list(range(n_actions)), (goal_var,), 1,
                              is_top=True)

    # construction ---------------------------------------------------------

    def build_round(self, edges: Iterable) -> list:
        """Extend units and option spaces from accepted edges; returns new subgoals."""
        edges = list(edges)
        if not edges:
            raise StructureError("no accepted edges")
        parents = state_parents(edges, self.n_vars)
        for v in self.parents:  # units never disappear, though their parents may change
            parents.setdefault(v, set())
        lv = levels(parents)
        spaces = option_spaces(parents, self.n_actions)
        new = []
        for sg, opts in spaces.items():
            key_vars = tuple(sorted(parents[sg.var] | {sg.var}))
            unit = self.units.get(sg)
            if unit is None:
                self.units[sg] = PolicyUnit(sg, opts, key_vars, lv[sg.var])
                new.append(sg)
            else:
                if not unit.promoted and (opts != unit.options or key_vars != unit.key_vars):
                    unit.reset()
                unit.resize(opts)
                unit.key_vars = key_vars
                unit.level = lv[sg.var]
        self.parents = parents
        self._refresh_top()
        return new

    def _refresh_top(self) -> None:
        opts = top_options(self.parents, self.list_do, self.n_actions)
        self.top.resize(opts)
        g = self.goal_var
        self.top.key_vars = tuple(sorted(self.parents.get(g, set()) | {g}))
        self.top.level = 1 + max((self.units[o].level for o in opts if isinstance(o, SubGoal)),
                                 default=0)

    def budget(self, unit: PolicyUnit) -> int:
        return self.settings.budget_per_level * unit.level

    def available(self, unit: PolicyUnit) -> np.ndarray:
        """Primitive actions and promoted subgoals are executable."""
        return np.array([isinstance(o, int) or (o in self.units and self.units[o].promoted)
                         for o in unit.options])

    def promote(self, unit: PolicyUnit) -> bool:
        if not unit.promoted and should_promote(unit.success_ratio, unit.n_evals):
            unit.promoted = True
            if not unit.is_top and unit.goal not in self.list_do:
                self.list_do.append(unit.goal)
                self._refresh_top()
        return unit.promoted

    # execution ------------------------------------------------------------

    def key(self, unit: PolicyUnit, state: Sequence[int], history: Sequence[int] = ()) -> tuple:
        base = tuple(1 if state[v] > 0 else 0 for v in unit.key_vars)
        if self.settings.history:
            pad = (-1,) * self.settings.history + tuple(history)
            return base + pad[-self.settings.history:]
        return base

    def epsilon(self, unit: PolicyUnit) -> float:
        s = self.settings
        span = max(1.0, s.eps_fraction * s.unit_episodes)
        frac = min(1.0, unit.episodes / span)
        return s.eps_start + frac * (s.eps_end - s.eps_start)

    def select(self, unit: PolicyUnit, key: tuple, greedy: bool) -> int:
        avail = self.available(unit)
        idx = np.flatnonzero(avail)
        if not greedy and self.rng.random() < self.epsilon(unit):
            # exploration follows the empowerment policy when it is enabled
            if self.settings.emp_weight:
                p = softmax(unit.logits(key)[idx])
                return int(idx[min(np.searchsorted(np.cumsum(p), self.rng.random()), len(idx) - 1)])
            return int(idx[self.rng.integers(len(idx))])
        pref = unit.values(key)[idx]
        best = np.flatnonzero(pref >= pref.max() - 1e-12)
        return int(idx[best[self.rng.integers(len(best))]] if len(best) > 1 else idx[best[0]])

    def _hit(self, world: World, goal: SubGoal, since: int) -> bool:
        steps = (world.increases if goal.up else world.decreases)[goal.var]
        return bool(steps) and steps[-1] > since

    def sample_delays(self, var: int, n: int) -> np.ndarray:
        """Read-out delays for ``n`` decisions of a unit whose goal is ``var``."""
        cdf = np.cumsum(self.delays[var])
        cdf[-1] = 1.0
        return np.searchsorted(cdf, self.rng.random(n), side="right") + 1

    def execute(self, world: World, unit: PolicyUnit, budget: int, greedy: bool,
                depth: int = 0) -> tuple[int, bool, list]:
        """Run ``unit`` until its goal is achieved or ``budget`` steps are spent.

        The unit picks an option at every decision point; delayed effects land
        while it keeps acting. At the outermost level, up to ``tau_max`` no-op
        steps follow an exhausted budget so a pending effect can still count.
        Returns (steps used, achieved, transitions of this unit); transitions
        are only built for non-greedy (training) rollouts.
        """
        if budget <= 0:
            return 0, False, []
        t0 = world.t
        decisions: list = []  # (start step, end step, key, option index)
        history: list = []
        hit = False
        while world.t - t0 < budget and not world.done:
            key = self.key(unit, world.state, history)
            oi = self.select(unit, key, greedy)
            opt = unit.options[oi]
            ts = world.t
            if isinstance(opt, int):
                world.step(opt)
            else:
                child = self.units[opt]
                self.execute(world, child, min(budget - (ts - t0), self.budget(child)), greedy,
                             depth + 1)
            decisions.append((ts, world.t, key, oi))
            history.append(oi)
            if self._hit(world, unit.goal, t0):
                hit = True
                break
        if not hit and depth == 0:
            for _ in range(self.settings.tau_max):
                if world.done:
                    break
                world.step(NOOP)
                if self._hit(world, unit.goal, t0):
                    hit = True
                    break
        used = world.t - t0
        if greedy or not decisions:
            return used, hit, []
        return used, hit, self._transitions(world, unit, decisions)

    def _transitions(self, world: World, unit: PolicyUnit, decisions: list) -> list:
        """Q-learning transitions whose outcome is read a sampled delay after each option ends."""
        t_end = world.t
        t_first = decisions[0][0]
        events = []  # (step, subgoal) for every rise or fall inside this unit's span
        for v in range(self.n_vars):
            for up, steps in ((True, world.increases[v]), (False, world.decreases[v])):
                for t in reversed(steps):
                    if t <= t_first:
                        break
                    events.append((t, SubGoal(v, up)))
        taus = self.sample_delays(unit.goal.var, len(decisions))
        out = []
        for (ts, te, key, oi), tau in zip(decisions, taus):
            t_read = min(te - 1 + int(tau), t_end)
            achieved = frozenset(g for t, g in events if ts < t <= t_read)
            hit = unit.goal in achieved
            later = [d[3] for d in decisions if d[0] < t_read] if self.settings.history else ()
            s2 = world.trajectory[t_read]
            out.append(Transition(world.trajectory[ts], key, oi, float(hit), s2,
                                  self.key(unit, s2, later), achieved, hit))
        return out

    def option_step(self, world: World, unit: PolicyUnit, option: Option, budget: int) -> tuple[int, bool]:
        """Execute one option of ``unit`` directly; a contract check on Omega."""
        unit.index(option)
        if budget <= 0:
            return 0, False
        if isinstance(option, int):
            t0 = world.t
            world.step(option)
            return 1, self._hit(world, unit.goal, t0)
        child = self.units[option]
        used, ok, _ = self.execute(world, child, min(budget, self.budget(child)), True, 1)
        return used, ok

    # learning -------------------------------------------------------------

    def _q_update(self, unit: PolicyUnit, t: Transition) -> None:
        row = unit.values(t.key)
        nxt = 0.0 if t.done else float(unit.values(t.next_key).max())
        target = t.reward + self.settings.gamma * nxt
        row[t.option] += self.settings.alpha * (target - row[t.option])

    def learn(self, unit: PolicyUnit, transitions: Sequence[Transition]) -> None:
        for t in transitions:
            self._q_update(unit, t)
        unit.replay.extend(transitions)
        if len(unit.replay) > self.settings.replay_size:
            del unit.replay[: len(unit.replay) - self.settings.replay_size]
        if unit.replay:
            n = min(self.settings.replay_batch, len(unit.replay))
            for i in self.rng.integers(0, len(unit.replay), size=n):
                self._q_update(unit, unit.replay[i])

    def route_hindsight(self, unit: PolicyUnit, transitions: Sequence[Transition]) -> None:
        """Deliver hindsight copies to the units owning the achieved subgoals."""
        for goal, copies in her_relabel(transitions, unit.goal).items():
            if goal == unit.goal:
                continue
            target = self.units.get(goal)
            if target is None or target.promoted:
                continue
            moved = []
            for t in copies:
                opt = unit.options[t.option]
                if opt not in target.options:
                    continue
                moved.append(Transition(t.state, self.key(target, t.state), target.index(opt),
                                        t.reward, t.next_state, self.key(target, t.next_state),
                                        t.achieved, t.done))
            if moved:
                self.learn(target, moved)

    def empowerment_step(self, unit: PolicyUnit, transitions: Sequence[Transition],
                         emp: Callable[[PolicyUnit, tuple], float]) -> None:
        """Policy-gradient step on the empowerment logits with batch-normalized advantages."""
        if not self.settings.emp_weight or len(transitions) < 2:
            return
        adv = normalize_advantages([emp(unit, t.next_state) for t in transitions])
        for t, a in zip(transitions, adv):
            logits = unit.logits(t.key)
            advantage_update(logits[None, :], 0, t.option, float(a), lr=self.settings.emp_lr,
                             weight=self.settings.emp_weight)
            np.clip(logits, -THETA_CLAMP, THETA_CLAMP, out=logits)

    def evaluate(self, world: World, unit: PolicyUnit) -> tuple[bool, tuple]:
        world.reset()
        _, ok, _ = self.execute(world, unit, min(self.budget(unit), world.horizon), greedy=True)
        return ok, world.state

    def train_unit(self, unit: PolicyUnit, world: World, eval_world: World, n_episodes: int,
                   emp: Callable | None = None, on_eval: Callable | None = None,
                   budget_left: Callable[[], int] | None = None) -> PolicyUnit:
        """Train for up to ``n_episodes`` or until promoted; greedy eval every 10 episodes."""
        for _ in range(n_episodes):
            if unit.promoted and not unit.is_top:
                break
            if budget_left is not None and budget_left() <= 0:
                break
            world.reset()
            _, _, trans = self.execute(world, unit, min(self.budget(unit), world.horizon), False)
            unit.episodes += 1
            self.episodes_used += 1
            self.learn(unit, trans)
            self.route_hindsight(unit, trans)
            if emp is not None:
                self.empowerment_step(unit, trans, emp)
            if unit.episodes % EVAL_EVERY == 0:
                ok, final = self.evaluate(eval_world, unit)
                unit.evals.append(ok)
                unit.n_evals += 1
                if on_eval is not None:
                    on_eval(unit, ok, final)
                self.promote(unit)
        return unit

    # snapshots ------------------------------------------------------------

    def _opt_label(self, o: Option) -> str:
        return o.label(self.var_names) if isinstance(o, SubGoal) else f"a{o}"

    def snapshot(self) -> dict:
        def unit_dict(u: PolicyUnit) -> dict:
            return {
                "goal": u.goal.label(self.var_names),
                "options": [self._opt_label(o) for o in u.options],
                "level": u.level,
                "status": "promoted" if u.promoted else "training",
                "success_ratio": round(u.success_ratio, 6),
                "evaluations": u.n_evals,
                "episodes": u.episodes,
            }

        return {
            "list_do": [self._opt_label(o) for o in self.list_do],
            "units": [unit_dict(self.units[g]) for g in sorted(self.units)],
            "top": unit_dict(self.top),
        }

    def dumps(self) -> str:
        return json.dumps(self.snapshot(), indent=2, sort_keys=True)
