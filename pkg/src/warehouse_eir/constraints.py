"""Time/space/resource predicates, the budget matrix and the action safety filter.

Windows are ``n x n`` arrays indexed ``[row, col]`` = ``[dy + r, dx + r]``
relative to the agent's position at decision time (``r = n // 2``).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

MOVES = ((0, 0), (0, -1), (0, 1), (-1, 0), (1, 0))
MOVE_NAMES = ("stay", "up", "down", "left", "right")
RESPONSES = ("none", "respond_a", "respond_b_carry", "respond_c")
RESPONSE_TYPE = {1: "a", 2: "b", 3: "c"}
N_MOVES, N_RESPONSES = len(MOVES), len(RESPONSES)
N_ACTIONS = N_MOVES * N_RESPONSES

SPACE, TIME, RESOURCE = "space", "time", "resource"


def encode_action(move: int, respond: int) -> int:
    if not (0 <= move < N_MOVES and 0 <= respond < N_RESPONSES):
        raise ValueError(f"invalid action components ({move}, {respond})")
    return move * N_RESPONSES + respond


def decode_action(a: int) -> tuple[int, int]:
    if not 0 <= a < N_ACTIONS:
        raise ValueError(f"action index {a} outside [0, {N_ACTIONS})")
    return divmod(int(a), N_RESPONSES)


# ---------------------------------------------------------------------------
# predicates
# ---------------------------------------------------------------------------

def check_time(task, t_m: int) -> bool:
    return task.t_e + t_m <= task.t_d - task.t_n


def check_space(p_i, p_j, d: float) -> bool:
    return math.hypot(p_i[0] - p_j[0], p_i[1] - p_j[1]) >= d


def check_resource(required, available) -> bool:
    required = np.asarray(required)
    available = np.asarray(available)
    if required.shape != available.shape:
        raise ValueError("resource vectors must have the same dimension")
    return bool(np.all(required <= available))


def response_time(ct: int, n: int) -> int:
    """Ticks for n agents to finish a response of base cost ct, rounded up."""
    if n <= 0:
        raise ValueError("response needs at least one agent")
    if ct < 0:
        raise ValueError("CT must be non-negative")
    return -(-int(ct) // int(n))


def compute_budget(c_sum: np.ndarray, h, m: np.ndarray) -> np.ndarray:
    """M_b = (sum of violations - h) masked by M_c. ``h`` broadcasts."""
    c_sum = np.asarray(c_sum)
    m = np.asarray(m)
    if c_sum.shape != m.shape:
        raise ValueError(f"shape mismatch {c_sum.shape} vs {m.shape}")
    h = np.asarray(h)
    if c_sum.ndim == 3 and h.ndim == 1:
        h = h[:, None, None]
    return ((c_sum.astype(np.int64) - h) * m).astype(np.int64)


def exhausted(m: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cells whose tolerance is used up: constrained and sum >= h."""
    return (np.asarray(m) == 1) & (np.asarray(b) >= 0)


# ---------------------------------------------------------------------------
# violation cost
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Snapshot:
    """Everything the constraint predicates read from a state, pre-step."""

    g: object  # OperationGraph
    agent_nodes: tuple[int, ...]
    running_devices: tuple[int, ...]
    critical_cells: frozenset  # next device cells whose task has no time slack
    fire_nodes: frozenset
    d_safe: float
    window: int

    def move_node(self, node: int, move: int) -> int:
        dx, dy = MOVES[move]
        if dx == 0 and dy == 0:
            return node
        x, y = self.g.coords[node]
        nb = self.g.index.get((x + dx, y + dy))
        if nb is None:
            return node
        for v, _ in self.g.neighbors[node]:
            if v == nb:
                return nb
        return node


def _rel(snap: Snapshot, center: int, node: int) -> Optional[tuple[int, int]]:
    r = snap.window // 2
    cx, cy = snap.g.coords[center]
    x, y = snap.g.coords[node]
    dx, dy = x - cx, y - cy
    if abs(dx) > r or abs(dy) > r:
        return None
    return dy + r, dx + r


def agent_violations(snap: Snapshot, i: int, pre: Sequence[int], post: Sequence[int]) -> list:
    """Cells (row, col, kind) where agent i's move violates a predicate."""
    out = []
    coords = snap.g.coords
    p = coords[post[i]]
    center = pre[i]
    for j, q in enumerate(post):
        if j != i and not check_space(p, coords[q], snap.d_safe):
            cell = _rel(snap, center, q)
            if cell is not None:
                out.append((cell[0], cell[1], SPACE))
    for dev in snap.running_devices:
        if not check_space(p, coords[dev], snap.d_safe):
            cell = _rel(snap, center, dev)
            if cell is not None:
                out.append((cell[0], cell[1], SPACE))
    if post[i] in snap.fire_nodes:
        cell = _rel(snap, center, post[i])
        out.append((cell[0], cell[1], SPACE))
    elif post[i] in snap.critical_cells:
        cell = _rel(snap, center, post[i])
        out.append((cell[0], cell[1], TIME))
    return out


def violation_cost(snap: Snapshot, joint_action: Sequence[int]) -> tuple[np.ndarray, list]:
    """Binary per-agent, per-cell cost C-hat of executing ``joint_action``.

    Returns the ``(agents, n, n)`` matrix and ``(agent, row, col, kind)``
    events (one per marked cell, first kind wins).
    """
    pre = snap.agent_nodes
    post = [snap.move_node(pre[i], decode_action(a)[0]) for i, a in enumerate(joint_action)]
    n = snap.window
    cost = np.zeros((len(pre), n, n), dtype=np.int64)
    events = []
    for i in range(len(pre)):
        for row, col, kind in agent_violations(snap, i, pre, post):
            if cost[i, row, col] == 0:
                cost[i, row, col] = 1
                events.append((i, row, col, kind))
    return cost, events


# ---------------------------------------------------------------------------
# safety filter
# ---------------------------------------------------------------------------

def _filter_cost(snap, i, pre, positions, exh) -> int:
    total = 0
    for row, col, _ in set(agent_violations(snap, i, pre, positions)):
        if exh[i][row, col]:
            total += 1
    # violations this position would induce on agents already filtered
    p = snap.g.coords[positions[i]]
    for j in range(i):
        if not check_space(snap.g.coords[positions[j]], p, snap.d_safe):
            cell = _rel(snap, pre[j], positions[i])
            if cell is not None and exh[j][cell]:
                total += 1
    return total


def exhausted_violations(snap: Snapshot, joint_action: Sequence[int], m: np.ndarray, b: np.ndarray) -> int:
    """Number of violated cells whose tolerance is already used up."""
    cost, _ = violation_cost(snap, joint_action)
    return int(np.sum(cost.astype(bool) & exhausted(m, b)))


def safety_filter(
    proposed: Sequence[int], snap: Snapshot, m: np.ndarray, b: np.ndarray
) -> list[int]:
    """Repair proposed joint action so exhausted constraints are not violated.

    Agents are filtered in id order; earlier choices are visible to later
    agents, later agents are assumed to stay put. A violating move is
    replaced by the first violation-free move (same response component) in
    enumeration order, else by staying in place.

    Greedy repair can paint a later agent into a corner. When the result
    still violates an exhausted cell, every joint move is enumerated and the
    violation-free one changing the fewest proposed moves wins (first in
    enumeration order on ties). If none exists the greedy result stands.
    Response components are never changed.
    """
    exh = exhausted(m, b)
    pre = list(snap.agent_nodes)
    positions = list(pre)
    safe = []
    for i, a in enumerate(proposed):
        move, respond = decode_action(a)
        positions[i] = snap.move_node(pre[i], move)
        if _filter_cost(snap, i, pre, positions, exh) > 0:
            choice = 0
            for alt in range(N_MOVES):
                positions[i] = snap.move_node(pre[i], alt)
                if _filter_cost(snap, i, pre, positions, exh) == 0:
                    choice = alt
                    break
            move = choice
            positions[i] = snap.move_node(pre[i], move)
        safe.append(encode_action(move, respond))
    if exhausted_violations(snap, safe, m, b) == 0:
        return safe
    wanted = [decode_action(a) for a in proposed]
    best, best_changes = safe, None
    for moves in itertools.product(range(N_MOVES), repeat=len(pre)):
        joint = [encode_action(mv, r) for mv, (_, r) in zip(moves, wanted)]
        if exhausted_violations(snap, joint, m, b):
            continue
        changes = sum(mv != w for mv, (w, _) in zip(moves, wanted))
        if best_changes is None or changes < best_changes:
            best, best_changes = joint, changes
    return best
