from __future__ import annotations

import json

import numpy as np
import pytest

from dechrl.hierarchy import (Hierarchy, HierarchySettings, OptionError, PolicyUnit, StructureError,
                              SubGoal, Transition, her_relabel, levels, option_spaces,
                              should_promote, state_parents, top_options)
from dechrl import delaydist as dd
from dechrl.scm import Edge
from dechrl.world import WorldConfig, make_task, task_spec

SILVER = task_spec("GetSilverore", 4, 0.0)
WOOD, STONE, STICK, PICK, ORE = range(5)
N_ACT = SILVER.n_actions
A = list(range(N_ACT))
CHAIN_PARENTS = {WOOD: set(), STONE: set(), STICK: {WOOD}, PICK: {STONE, STICK}, ORE: {PICK}}


def chain_edges():
    act = {name: SILVER.n_vars + i for i, name in enumerate(SILVER.actions)}
    return [Edge(act["collect_wood"], WOOD, 2, .9), Edge(act["collect_stone"], STONE, 2, .9),
            Edge(WOOD, STICK, 3, .9), Edge(STONE, PICK, 4, .9), Edge(STICK, PICK, 4, .9),
            Edge(PICK, ORE, 3, .9)]


@pytest.mark.parametrize("ratio,expected", [(0.6, True), (0.5, False), (0.4, False)])
def test_promotion_threshold(ratio, expected):
    assert should_promote(ratio, 100) is expected


def test_promotion_needs_enough_evaluations():
    assert not should_promote(1.0, 99)


def test_stonepickaxe_options():
    spaces = option_spaces(CHAIN_PARENTS, N_ACT)
    expected = A + [SubGoal(STONE, True), SubGoal(STONE, False),
                    SubGoal(STICK, True), SubGoal(STICK, False)]
    assert spaces[SubGoal(PICK, True)] == expected
    assert spaces[SubGoal(WOOD, True)] == A


def test_state_parents_drop_actions():
    assert state_parents(chain_edges(), SILVER.n_vars) == CHAIN_PARENTS


def test_levels_follow_chain():
    assert levels(CHAIN_PARENTS) == {WOOD: 1, STONE: 1, STICK: 2, PICK: 3, ORE: 4}


def test_cycle_is_structural_error():
    with pytest.raises(StructureError):
        option_spaces({0: {1}, 1: {0}}, 2)


def new_hierarchy(seed=0, **kw) -> Hierarchy:
    settings = HierarchySettings(tau_max=4, **kw)
    return Hierarchy(SILVER.n_vars, N_ACT, ORE, settings, np.random.default_rng(seed), SILVER.variables)


def test_round_zero_top_is_primitive():
    h = new_hierarchy()
    assert h.top.options == A
    assert h.list_do == A
    assert top_options({}, A, N_ACT) == A


def test_build_round_creates_units():
    h = new_hierarchy()
    new = h.build_round(chain_edges())
    assert set(new) == {SubGoal(v, up) for v in range(5) for up in (True, False)}
    assert h.units[SubGoal(ORE, True)].level == 4
    assert h.top.level == 5
    with pytest.raises(StructureError):
        h.build_round([])


def deterministic_world(seed=0):
    return make_task(WorldConfig(sigma_delay=0.0, rng_seed=seed))


def test_primitive_option_is_one_step():
    h = new_hierarchy()
    h.build_round(chain_edges())
    w = deterministic_world()
    used, _ = h.option_step(w, h.units[SubGoal(WOOD, True)], 1, 10)
    assert used == 1 and w.t == 1


def test_zero_budget_fails_immediately():
    h = new_hierarchy()
    h.build_round(chain_edges())
    w = deterministic_world()
    unit = h.units[SubGoal(WOOD, True)]
    assert h.execute(w, unit, 0, True) == (0, False, [])
    assert h.option_step(w, unit, 1, 0) == (0, False)


def test_option_outside_omega():
    h = new_hierarchy()
    h.build_round(chain_edges())
    with pytest.raises(OptionError):
        h.option_step(deterministic_world(), h.units[SubGoal(WOOD, True)], SubGoal(STONE, True), 5)


def test_promoted_subgoal_option_achieves_goal():
    h = new_hierarchy(emp_weight=0.0)
    h.build_round(chain_edges())
    h.delays = point_masses([2, 2, 3, 4, 3])
    stone = h.units[SubGoal(STONE, True)]
    h.train_unit(stone, deterministic_world(1), deterministic_world(2), 2000)
    assert stone.promoted and stone.success_ratio == 1.0
    w = deterministic_world(3)
    pick = h.units[SubGoal(PICK, True)]
    used, ok = h.option_step(w, pick, SubGoal(STONE, True), h.budget(pick))
    assert ok and used <= h.budget(stone)
    assert w.state[STONE] == 1


def point_masses(delays, tau_max=4):
    return dd.delay_distribution(dd.point_mass(delays, tau_max))


def trans(achieved, option=0):
    return Transition((0,), (0,), option, 0.0, (0,), (0,), frozenset(achieved), False)


def test_her_nothing_achieved():
    out = her_relabel([trans([]), trans([])], SubGoal(WOOD, True))
    assert list(out) == [SubGoal(WOOD, True)]
    assert all(t.reward == 0 for t in out[SubGoal(WOOD, True)])


def test_her_relabels_other_achievement():
    seq = [trans([]), trans([SubGoal(STONE, True)]), trans([])]
    out = her_relabel(seq, SubGoal(WOOD, True))
    assert set(out) == {SubGoal(WOOD, True), SubGoal(STONE, True)}
    copy = out[SubGoal(STONE, True)]
    assert len(copy) == 2
    assert [t.reward for t in copy] == [0.0, 1.0]
    assert copy[-1].done


def test_her_no_duplicate_for_own_goal():
    out = her_relabel([trans([SubGoal(WOOD, True)])], SubGoal(WOOD, True))
    assert list(out) == [SubGoal(WOOD, True)]
    assert len(out[SubGoal(WOOD, True)]) == 1


def one_rule_task(tmp_path, mu):
    table = {"variables": ["a", "b"], "actions": ["noop", "make_a", "make_b", "junk"], "goal": "b",
             "rules": [{"effect": "a", "actions": ["make_a"], "mu": mu},
                       {"effect": "b", "parents": {"a": 1}, "actions": ["make_b"], "mu": mu}]}
    path = tmp_path / "task.json"
    path.write_text(json.dumps(table))
    return str(path)


def train_first_unit(path, mu, delay, seed, episodes):
    def world(s):
        return make_task(WorldConfig(tau_max=4, sigma_delay=0.0, rules_path=path, rng_seed=s))

    h = Hierarchy(2, 4, 1, HierarchySettings(tau_max=4, emp_weight=0.0, unit_episodes=episodes),
                  np.random.default_rng(seed))
    h.build_round([Edge(3, 0, mu, .9), Edge(0, 1, mu, .9)])
    h.delays = point_masses([delay, delay])
    unit = h.units[SubGoal(0, True)]
    h.train_unit(unit, world(seed), world(seed + 100), episodes)
    return h, unit, world(seed + 200)


def test_converges_on_one_step_world(tmp_path):
    path = one_rule_task(tmp_path, mu=1)
    h, unit, w = train_first_unit(path, 1, 1, 0, 500)
    assert all(list(unit.evals)[-20:])
    assert all(h.evaluate(w, unit)[0] for _ in range(100))


def test_wrong_lag_lowers_success(tmp_path):
    path = one_rule_task(tmp_path, mu=3)
    right = [train_first_unit(path, 3, 3, s, 300)[1].success_ratio for s in range(5)]
    wrong = [train_first_unit(path, 3, 1, s, 300)[1].success_ratio for s in range(5)]
    assert np.mean(wrong) < np.mean(right)


def test_zero_empowerment_weight_ignores_bonus():
    def trained(emp):
        h = new_hierarchy(seed=4, emp_weight=0.0)
        h.build_round(chain_edges())
        unit = h.units[SubGoal(STICK, True)]
        h.train_unit(unit, deterministic_world(5), deterministic_world(6), 60, emp=emp)
        return unit

    plain = trained(None)
    bonus = trained(lambda unit, state: float(sum(state)))
    assert plain.theta == bonus.theta == {}
    assert plain.q.keys() == bonus.q.keys()
    for k in plain.q:
        np.testing.assert_array_equal(plain.q[k], bonus.q[k])


def test_empowerment_step_moves_logits():
    h = new_hierarchy(emp_weight=0.1)
    h.build_round(chain_edges())
    unit = h.units[SubGoal(WOOD, True)]
    seq = [Transition((0,) * 5, (0,), o, 0.0, (o,) + (0,) * 4, (0,), frozenset(), False)
           for o in (1, 2)]
    h.empowerment_step(unit, seq, lambda u, s: float(s[0]))
    logits = unit.logits((0,))
    assert logits[2] > logits[1]


def test_resize_keeps_values():
    unit = PolicyUnit(SubGoal(0), [0, 1], (0,), 1)
    unit.values((1,))[:] = [0.3, 0.7]
    unit.resize([0, 1, SubGoal(2)])
    np.testing.assert_array_equal(unit.values((1,)), [0.3, 0.7, 0.0])


def test_snapshot_is_json():
    h = new_hierarchy()
    h.build_round(chain_edges())
    snap = json.loads(h.dumps())
    assert snap["list_do"] == [f"a{i}" for i in A]
    goals = {u["goal"] for u in snap["units"]}
    assert "stonepickaxe+" in goals and "wood-" in goals
    assert snap["top"]["status"] == "training"
