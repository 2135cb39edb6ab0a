import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from warehouse_eir.constraints import (
    N_ACTIONS,
    N_MOVES,
    Snapshot,
    check_resource,
    check_space,
    check_time,
    compute_budget,
    decode_action,
    encode_action,
    exhausted,
    exhausted_violations,
    response_time,
    safety_filter,
    violation_cost,
)
from warehouse_eir.scenario import PhysicalGraph, PhysicalNode, Task, build_operation_graph

PG = PhysicalGraph((PhysicalNode("s", "shelf", 0, ((0, 0),)),), ())


def grid(w=5, h=5):
    return build_operation_graph(PG, {0: [(x, y) for y in range(h) for x in range(w)]})


def snap(g, agents, devices=(), fire=(), critical=(), d_safe=2.0, window=5):
    idx = g.index
    return Snapshot(g, tuple(idx[a] for a in agents), tuple(idx[d] for d in devices),
                    frozenset(idx[c] for c in critical), frozenset(idx[f] for f in fire), d_safe, window)


def task(t_e, t_d, t_n):
    return Task(0, 0, t_d=t_d, t_e=t_e, t_n=t_n, num=1, ga=1)


def test_action_codec_round_trip():
    assert [encode_action(*decode_action(a)) for a in range(N_ACTIONS)] == list(range(N_ACTIONS))
    with pytest.raises(ValueError):
        decode_action(N_ACTIONS)
    with pytest.raises(ValueError):
        encode_action(N_MOVES, 0)


@pytest.mark.parametrize("t_e,t_m,t_d,t_n,ok", [(5, 0, 10, 3, True), (5, 3, 10, 3, False), (4, 3, 10, 3, True)])
def test_check_time_examples(t_e, t_m, t_d, t_n, ok):
    assert check_time(task(t_e, t_d, t_n), t_m) is ok


def test_check_space_examples():
    assert check_space((0, 0), (3, 4), 5)
    assert not check_space((0, 0), (0, 0), 1)


@given(st.tuples(st.integers(-50, 50), st.integers(-50, 50)), st.tuples(st.integers(-50, 50), st.integers(-50, 50)),
       st.integers(0, 80))
def test_check_space_matches_squared_integer_oracle(p, q, d):
    assert check_space(p, q, d) == ((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 >= d * d)


def test_check_resource_examples():
    assert check_resource([0, 0], [0, 0])
    assert check_resource([2, 1], [2, 1])
    assert not check_resource([3, 0], [2, 5])
    with pytest.raises(ValueError):
        check_resource([1], [1, 2])


@pytest.mark.parametrize("ct,n,t", [(12, 3, 4), (10, 4, 3), (7, 1, 7), (0, 2, 0)])
def test_response_time(ct, n, t):
    assert response_time(ct, n) == t


def test_response_time_needs_an_agent():
    with pytest.raises(ValueError):
        response_time(3, 0)


def test_budget_examples():
    assert compute_budget(np.array([[3]]), 2, np.array([[1]]))[0, 0] == 1
    assert compute_budget(np.array([[9]]), 2, np.array([[0]]))[0, 0] == 0
    assert compute_budget(np.array([[1]]), 2, np.array([[1]]))[0, 0] == -1
    with pytest.raises(ValueError):
        compute_budget(np.zeros((2, 2)), 0, np.zeros((3, 3)))


@given(st.integers(0, 2**32 - 1))
def test_budget_per_agent_threshold_broadcast(seed):
    rng = np.random.default_rng(seed)
    c = rng.integers(0, 5, (3, 5, 5))
    m = rng.integers(0, 2, (3, 5, 5))
    h = rng.integers(0, 4, 3)
    b = compute_budget(c, h, m)
    for i in range(3):
        np.testing.assert_array_equal(b[i], (c[i] - h[i]) * m[i])
    assert np.all(b[m == 0] == 0)


def test_no_violation_when_apart():
    g = grid()
    s = snap(g, [(0, 0), (4, 4)])
    cost, events = violation_cost(s, [0, 0])
    assert cost.sum() == 0 and events == []


def test_two_agents_moving_adjacent():
    # agent 0 at (1,2) moves right to (2,2); agent 1 at (4,2) moves left to (3,2)
    g = grid()
    s = snap(g, [(1, 2), (4, 2)])
    right, left = encode_action(4, 0), encode_action(3, 0)
    cost, _ = violation_cost(s, [right, left])
    # each agent marks the other's post-move cell relative to its own pre-move centre
    expected0 = np.zeros((5, 5), int)
    expected0[2, 2 + 2] = 1  # (3,2) seen from (1,2)
    expected1 = np.zeros((5, 5), int)
    expected1[2, 2 - 2] = 1  # (2,2) seen from (4,2)
    np.testing.assert_array_equal(cost[0], expected0)
    np.testing.assert_array_equal(cost[1], expected1)


def test_repeated_violation_accumulates():
    g = grid()
    s = snap(g, [(1, 1), (2, 1)])
    acc = np.zeros((2, 5, 5), int)
    for _ in range(4):
        acc += violation_cost(s, [0, 0])[0]
    assert acc[0, 2, 3] == 4 and acc[1, 2, 1] == 4


def test_fire_entry_and_critical_cell_kinds():
    g = grid()
    s = snap(g, [(2, 2)], fire=[(3, 2)], critical=[(2, 1)])
    _, ev = violation_cost(s, [encode_action(4, 0)])
    assert ev == [(0, 2, 3, "space")]
    _, ev = violation_cost(s, [encode_action(1, 0)])
    assert ev == [(0, 1, 2, "time")]


def test_safe_action_unchanged():
    g = grid()
    s = snap(g, [(0, 0), (4, 4)])
    m = np.ones((2, 5, 5), int)
    b = compute_budget(np.zeros((2, 5, 5), int), 0, m)
    prop = [encode_action(2, 1), encode_action(1, 3)]
    assert safety_filter(prop, s, m, b) == prop


def test_same_cell_conflict_lower_id_keeps_move():
    g = grid()
    # both propose to enter (2,2); d_safe = 1 so only coincidence violates
    s = snap(g, [(1, 2), (3, 2)], d_safe=1.0)
    m = np.ones((2, 5, 5), int)
    b = compute_budget(np.zeros((2, 5, 5), int), 0, m)
    prop = [encode_action(4, 0), encode_action(3, 0)]
    out = safety_filter(prop, s, m, b)
    assert out[0] == prop[0]
    assert out[1] != prop[1]
    # oracle: among the 25 joint move pairs, the output is violation-free
    assert exhausted_violations(s, out, m, b) == 0
    free = [mv for mv in itertools.product(range(N_MOVES), repeat=2)
            if exhausted_violations(s, [encode_action(a, 0) for a in mv], m, b) == 0]
    assert tuple(decode_action(a)[0] for a in out) in free


def test_all_moves_violating_falls_back_to_stay():
    g = grid(3, 1)
    # boxed in on a strip by a running device on each side at distance 1
    s = snap(g, [(1, 0)], devices=[(0, 0), (2, 0)], d_safe=1.5)
    m = np.ones((1, 5, 5), int)
    b = compute_budget(np.zeros((1, 5, 5), int), 0, m)
    assert safety_filter([encode_action(4, 2)], s, m, b) == [encode_action(0, 2)]


def test_tolerated_violations_not_filtered():
    g = grid()
    s = snap(g, [(1, 2), (3, 2)])
    m = np.ones((2, 5, 5), int)
    prop = [encode_action(4, 0), 0]
    acc = np.zeros((2, 5, 5), int)
    # h = 2: the first two violations pass, the third is repaired
    for k in range(3):
        b = compute_budget(acc, 2, m)
        out = safety_filter(prop, s, m, b)
        if k < 2:
            assert out == prop
        else:
            assert out != prop
        acc += violation_cost(s, out)[0]


def random_small_state(rng):
    """Random 5x5 (or smaller) map with up to 3 agents, devices, fires and
    critical cells, plus random masks and accumulated violations."""
    w, h = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    g = grid(w, h)
    cells = list(g.coords)
    rng.shuffle(cells)
    k = int(rng.integers(1, 4))
    agents, rest = cells[:k], cells[k:]
    devices = [c for c in rest[: int(rng.integers(0, 3))]]
    fire = [c for c in rest if rng.random() < 0.1 and c not in devices]
    crit = [c for c in rest if rng.random() < 0.1]
    s = snap(g, agents, devices, fire, crit, d_safe=float(rng.choice([1.0, 1.5, 2.0])))
    m = rng.integers(0, 2, (k, 5, 5))
    b = compute_budget(rng.integers(0, 3, (k, 5, 5)), rng.integers(0, 3, k), m)
    prop = list(rng.integers(0, N_ACTIONS, k))
    return s, m, b, prop


def joint_safe_exists(s, m, b, k):
    return any(exhausted_violations(s, [encode_action(mv, 0) for mv in moves], m, b) == 0
               for moves in itertools.product(range(N_MOVES), repeat=k))


@given(st.integers(0, 2**32 - 1))
def test_filter_output_safe_whenever_a_safe_joint_move_exists(seed):
    rng = np.random.default_rng(seed)
    s, m, b, prop = random_small_state(rng)
    out = safety_filter(prop, s, m, b)
    assert [decode_action(a)[1] for a in out] == [decode_action(a)[1] for a in prop]
    if joint_safe_exists(s, m, b, len(prop)):
        assert exhausted_violations(s, out, m, b) == 0


@given(st.integers(0, 2**32 - 1))
def test_filter_idempotent(seed):
    s, m, b, prop = random_small_state(np.random.default_rng(seed))
    once = safety_filter(prop, s, m, b)
    assert safety_filter(once, s, m, b) == once


@given(st.integers(0, 2**32 - 1))
def test_unexhausted_cells_never_trigger_repair(seed):
    s, m, _, prop = random_small_state(np.random.default_rng(seed))
    b = compute_budget(np.zeros_like(m), 1, m)  # budget negative everywhere
    assert not exhausted(m, b).any()
    assert safety_filter(prop, s, m, b) == [int(a) for a in prop]
