import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from warehouse_eir.constraints import compute_budget, encode_action, violation_cost
from warehouse_eir.env import (
    CH_INC_A,
    CH_INC_C,
    DONE,
    PENDING,
    Transition,
    WarehouseEnv,
    reward,
    reward_components,
    task_progress,
)
from warehouse_eir.layouts import SEVERITY, make_layout, make_layout_dict
from warehouse_eir.scenario import RewardConstants, load_scenario, bundled_scenario_path, scenario_from_dict

STAY = encode_action(0, 0)
RESPOND_A = encode_action(0, 1)


def quiet_scenario(n_agents=1, **const):
    doc = make_layout_dict("A", n_agents, 0, **const)
    return scenario_from_dict(doc)


def type_a_fixture():
    """One agent at (0,0) next to a type-a incident at (1,0) in device 0's area."""
    doc = make_layout_dict("A", 1, 0)
    doc["incidents"] = [{"tick": 0, "node": [1, 0], "type": "a", "lambda": 0.0, **SEVERITY["a"]}]
    return scenario_from_dict(doc)


def test_reset_is_deterministic(layout_a):
    a, b = WarehouseEnv(layout_a), WarehouseEnv(layout_a)
    assert a.reset(5).to_dict() == b.reset(5).to_dict()


def test_reset_state(layout_a):
    env = WarehouseEnv(layout_a)
    s = env.reset(0)
    assert s.tick == 0 and s.omega == [PENDING] * len(layout_a.tasks)
    assert s.incidents == {} and s.accumulator.sum() == 0


def test_bundled_layout_agents_at_starts():
    sc = load_scenario(bundled_scenario_path("A"))
    s = WarehouseEnv(sc).reset()
    coords = [sc.op_graph.coords[a.node] for a in s.agents]
    assert coords == [(0, 0), (4, 0), (9, 0)]


def test_idle_step_moves_only_devices():
    env = WarehouseEnv(quiet_scenario())
    s = env.reset(0)
    agent_before = s.agents[0].node
    devs_before = [d.node for d in s.devices]
    _, r, done, info = env.step([STAY])
    assert s.tick == 1 and not done
    assert s.agents[0].node == agent_before
    assert [d.node for d in s.devices] != devs_before
    assert r.tolist() == [0.0] and info["violations"] == 0


def test_type_a_response_resolves_and_device_resumes():
    env = WarehouseEnv(type_a_fixture())
    s = env.reset(0)
    env.step([STAY])  # the incident triggers during this tick
    node = env.g.index[(1, 0)]
    assert node in s.incidents and s.devices[0].halted
    _, r1, _, _ = env.step([RESPOND_A])
    assert node in s.incidents and r1[0] == 0.0
    _, r2, _, _ = env.step([RESPOND_A])  # response_time(CT=2, 1 agent) = 2 ticks
    assert node not in s.incidents and node in s.resolved_nodes
    assert r2[0] == pytest.approx(0.4 * 10.0)
    assert not s.devices[0].halted


def test_failed_response_is_penalised():
    env = WarehouseEnv(quiet_scenario())
    env.reset(0)
    _, r, _, info = env.step([RESPOND_A])
    assert r[0] == pytest.approx(-0.4 * 10.0)
    assert any(e["kind"] == "response_failed" for e in info["events"])


def test_horizon_ends_episode():
    env = WarehouseEnv(quiet_scenario(horizon=5))
    env.reset(0)
    done = False
    for _ in range(5):
        assert not done
        _, _, done, _ = env.step([STAY])
    assert done and env.state.tick == 5


def test_malformed_action():
    env = WarehouseEnv(quiet_scenario())
    env.reset(0)
    with pytest.raises(ValueError):
        env.step([99])
    with pytest.raises(ValueError):
        env.step([0, 0])


def test_no_incidents_all_tasks_complete():
    env = WarehouseEnv(quiet_scenario())
    env.reset(0)
    done = False
    while not done:
        _, _, done, _ = env.step([STAY])
    prog = task_progress(env.state)
    assert prog[DONE] == len(env.state.tasks)
    assert sum(prog["completions"]) == len(env.state.tasks)


def test_reward_examples():
    rc = RewardConstants(alpha=1.0, beta=0.0, gamma=0.0)
    tr = Transition(np.array([1]), 0, 0.0, False)
    assert reward(tr, rc)[0] == 10.0
    assert reward(Transition(np.array([0]), 0, 0.0, False), RewardConstants())[0] == 0.0
    tr = Transition(np.array([1]), 1, 0.5, True)
    assert reward(tr, RewardConstants(1.0, 1.0, 1.0))[0] == pytest.approx(10 + 5 + 0.5)
    # gamma is forced to zero when no type-c incident is active
    assert reward(Transition(np.array([0]), 0, 0.5, False), RewardConstants(1.0, 1.0, 1.0))[0] == 0.0


@given(st.integers(0, 2**32 - 1))
def test_reward_linear_in_weights(seed):
    rng = np.random.default_rng(seed)
    tr = Transition(rng.integers(-2, 3, 3), int(rng.integers(-2, 3)), float(rng.random()), bool(rng.random() < 0.5))
    a, b, g = rng.random(3)
    basis = [reward(tr, RewardConstants(*w)) for w in ((1, 0, 0), (0, 1, 0), (0, 0, 1))]
    r = reward(tr, RewardConstants(a, b, g))
    np.testing.assert_allclose(r, a * basis[0] + b * basis[1] + g * basis[2], rtol=0, atol=1e-12)
    comp = reward_components(tr, RewardConstants())
    assert comp.shape == (3, 3)


def test_observation_incident_north():
    env = WarehouseEnv(type_a_fixture())
    s = env.reset(0)
    s.agents[0].node = env.g.index[(1, 1)]
    env.step([STAY])  # agent stays at (1,1); incident at (1,0) triggers
    obs = env.observe(0)
    r = env.window // 2
    assert obs.window[r - 1, r, CH_INC_A] == 1.0
    assert obs.window[:, :, CH_INC_A].sum() == 1.0


def test_observation_corner_padding(layout_a):
    env = WarehouseEnv(layout_a)
    env.reset(0)  # agent 0 starts at the (0,0) corner
    w = env.observe(0).window
    r = env.window // 2
    assert np.all(w[:r, :, :] == 0) and np.all(w[:, :r, :] == 0)


def test_observation_shape_and_flat(layout_a):
    env = WarehouseEnv(layout_a)
    env.reset(0)
    flat = env.observe_all()
    assert flat.shape == (3, env.obs_dim)
    np.testing.assert_array_equal(flat[1], env.observe(1).flat())
    with pytest.raises(IndexError):
        env.observe(7)


def random_rollout(env, seed, steps=None):
    rng = np.random.default_rng(seed)
    env.reset(int(rng.integers(2**31)))
    done = False
    while not done:
        acts = rng.integers(0, 20, env.n_agents)
        yield env.snapshot(), acts
        _, _, done, info = env.step(acts)


@pytest.mark.parametrize("seed", range(5))
def test_accumulator_matches_reaccumulated_cost(layout_a, seed):
    env = WarehouseEnv(layout_a)
    acc = np.zeros((3, 5, 5), dtype=np.int64)
    rng = np.random.default_rng(seed)
    for snap, acts in random_rollout(env, seed):
        # the generator steps only after this body, so acc still matches the state
        np.testing.assert_array_equal(env.state.accumulator, acc)
        m = rng.integers(0, 2, (3, 5, 5))
        env.set_constraints(m, 1)
        np.testing.assert_array_equal(env.state.budget(), compute_budget(acc, np.ones(3, int), m))
        acc += violation_cost(snap, acts)[0]
    np.testing.assert_array_equal(env.state.accumulator, acc)


@pytest.mark.parametrize("layout", ["A", "B", "C"])
def test_goods_conserved_and_statuses_partition(layout):
    env = WarehouseEnv(make_layout(layout, 3, 6, seed=0))
    for _ in random_rollout(env, 11):
        prog = task_progress(env.state)
        assert sum(prog[k] for k in ("pending", "in_progress", "done", "failed")) == len(env.state.tasks)
    assert env.state.total_goods() == env._total0


def test_trajectory_determinism(layout_a):
    def run():
        env = WarehouseEnv(layout_a)
        states = []
        for _ in random_rollout(env, 3):
            states.append(env.state.to_dict())
        return states
    assert run() == run()


def test_done_and_failed_are_absorbing(layout_a):
    env = WarehouseEnv(layout_a)
    seen = {}
    for _ in random_rollout(env, 4):
        for i, st_ in enumerate(env.state.omega):
            if i in seen and seen[i] in (DONE, "failed"):
                assert st_ == seen[i]
            seen[i] = st_


def test_spread_marks_type_c_channel():
    doc = make_layout_dict("A", 1, 0, p_spread=1.0)
    doc["incidents"] = [{"tick": 0, "node": [0, 2], "type": "c", "lambda": 0.1, **SEVERITY["c"]}]
    env = WarehouseEnv(scenario_from_dict(doc))
    s = env.reset(0)
    env.step([STAY])
    env.step([STAY])
    assert len(s.incidents) > 1 and all(i.type == "c" for i in s.incidents.values())
    assert env.observe(0).window[:, :, CH_INC_C].sum() >= 1
