from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from dechrl.world import (ConfigError, EpisodeFinished, TASK_NAMES, World, WorldConfig,
                          chain_depth, discretize_delay, load_task_file, make_task,
                          subgoal_distance, task_spec)


def quad_oracle(mu, sigma, tau_max):
    pdf = stats.norm(mu, sigma).pdf
    mass = np.array([integrate.quad(pdf, t - 0.5, t + 0.5)[0] for t in range(1, tau_max + 1)])
    return mass / mass.sum()


def test_point_mass_when_sigma_zero():
    np.testing.assert_array_equal(discretize_delay(2, 0, 4), [0, 1, 0, 0])


def test_symmetric_about_half_integer():
    p = discretize_delay(2.5, 0.4, 4)
    assert p[1] == pytest.approx(p[2], abs=1e-12)
    assert p[0] == pytest.approx(p[3], abs=1e-12)


def test_matches_quadrature():
    np.testing.assert_allclose(discretize_delay(3, 0.8, 4), quad_oracle(3, 0.8, 4), atol=1e-9)


@given(mu=st.floats(0.5, 30), sigma=st.floats(0.05, 5), tau_max=st.integers(1, 30))
@settings(max_examples=60, deadline=None)
def test_rows_normalised(mu, sigma, tau_max):
    p = discretize_delay(mu, sigma, tau_max)
    assert p.shape == (tau_max,)
    assert (p >= 0).all()
    assert p.sum() == pytest.approx(1.0, abs=1e-9)


def test_invalid_tau_max():
    with pytest.raises(ConfigError):
        discretize_delay(1, 0.4, 0)
    with pytest.raises(ConfigError):
        WorldConfig(tau_max=0)


def test_getsilverore_structure():
    spec = task_spec("GetSilverore", 4, 0.4)
    assert len(spec.rules) == 5
    assert chain_depth(spec) == 4
    parents = {spec.variables[r.effect]: {spec.variables[p] for p in r.state_parents}
               for r in spec.rules}
    assert parents == {"wood": set(), "stone": set(), "stick": {"wood"},
                       "stonepickaxe": {"stone", "stick"}, "silverore": {"stonepickaxe"}}


@pytest.mark.parametrize("name", ["Fire2Burn", "Wood2Wet", "GetIron"])
def test_other_tasks_build(name):
    spec = task_spec(name, 4, 0.4)
    assert chain_depth(spec) >= 3
    assert spec.actions[0] == "noop"


def test_unknown_task():
    with pytest.raises(ConfigError):
        make_task(WorldConfig(task_name="bogus"))


def deterministic(**kw) -> World:
    return make_task(WorldConfig(sigma_delay=0.0, **kw))


def test_delayed_arrival():
    w = deterministic()
    wood = w.spec.variables.index("wood")
    s, _ = w.step(w.spec.actions.index("collect_wood"))
    assert s[wood] == 0
    s, _ = w.step(0)
    assert s[wood] == 1
    assert w.increases[wood] == [2]


def test_unsatisfied_parent_has_no_effect():
    w = deterministic()
    s, _ = w.step(w.spec.actions.index("craft_stick"))
    assert not w.pending
    assert s == (0,) * w.n_vars


def test_scripted_chain_reaches_goal():
    w = deterministic()
    a = w.spec.actions.index
    for act in ["collect_wood", "collect_stone", "craft_stick", "craft_stonepickaxe",
                "mine_silverore"]:
        w.step(a(act))
        for _ in range(w.tau_max):
            w.step(0)
    assert w.state[w.spec.goal] >= 1
    assert w.t <= w.horizon


def test_step_after_horizon():
    w = make_task(WorldConfig(episode_horizon=6))
    for _ in range(6):
        w.step(0)
    with pytest.raises(EpisodeFinished):
        w.step(0)


def _write_task(tmp_path, mu):
    table = {"variables": ["a", "b"], "actions": ["noop", "make_a", "make_b"], "goal": "b",
             "rules": [{"effect": "a", "actions": ["make_a"], "mu": 1},
                       {"effect": "b", "parents": {"a": 1}, "actions": ["make_b"], "mu": mu}]}
    path = tmp_path / "task.json"
    path.write_text(json.dumps(table))
    return path


def test_tau_max_below_rule_delay(tmp_path):
    with pytest.raises(ConfigError):
        load_task_file(_write_task(tmp_path, mu=4), 2, 0.4)


def test_task_file_roundtrip(tmp_path):
    spec = load_task_file(_write_task(tmp_path, mu=3), 4, 0.4)
    assert spec.variables == ("a", "b")
    assert chain_depth(spec) == 2
    w = make_task(WorldConfig(tau_max=4, rules_path=str(_write_task(tmp_path, mu=3))))
    assert w.spec.name == "task"


def test_cyclic_task_file(tmp_path):
    table = {"variables": ["a", "b"], "actions": ["noop", "x"], "goal": "b",
             "rules": [{"effect": "a", "parents": {"b": 1}, "actions": ["x"], "mu": 1},
                       {"effect": "b", "parents": {"a": 1}, "actions": ["x"], "mu": 1}]}
    path = tmp_path / "cyc.json"
    path.write_text(json.dumps(table))
    with pytest.raises(ConfigError):
        load_task_file(path, 4, 0.4)


def test_subgoal_distance():
    spec = task_spec("GetSilverore", 4, 0.4)
    assert subgoal_distance(spec, (0, 0, 0, 0, 0)) == 5
    assert subgoal_distance(spec, (1, 1, 0, 0, 0)) == 3
    assert subgoal_distance(spec, (0, 0, 0, 0, 1)) == 0


def test_same_seed_same_trajectory():
    def roll(seed):
        w = make_task(WorldConfig(rng_seed=seed))
        acts = np.random.default_rng(0).integers(0, w.n_actions, 150)
        return [w.step(int(a)) for a in acts], w.increases

    assert roll(3) == roll(3)


def test_builtin_names():
    assert set(TASK_NAMES) >= {"GetSilverore", "Fire2Burn", "Wood2Wet"}
