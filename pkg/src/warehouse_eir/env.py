"""Constrained multi-agent warehouse environment.

One ``WarehouseEnv`` owns a mutable :class:`EnvState`. A tick runs, in order:
agent moves, responses, device motion, incident schedule/spread/damage,
task bookkeeping, rewards and the violation accumulator.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .constraints import (
    N_ACTIONS,
    RESPONSE_TYPE,
    Snapshot,
    check_resource,
    check_time,
    compute_budget,
    decode_action,
    response_time,
    violation_cost,
)
from .incidents import apply_response, damage_step, loss_reward, new_incident, should_trigger, step_spread
from .scenario import RewardConstants, Scenario, shortest_path, task_queue_order

PENDING, IN_PROGRESS, DONE, FAILED = "pending", "in_progress", "done", "failed"
TASK_STATUSES = (PENDING, IN_PROGRESS, DONE, FAILED)

# observation channels
CH_DEVICE, CH_AGENT, CH_INC_A, CH_INC_B, CH_INC_C, CH_GOODS, CH_MC, CH_B = range(8)
N_CHANNELS = 8
N_SCALARS = 5
# graph node features for the constraint extractor
NODE_FEATURES = ("device_running", "device_halted", "agent", "inc_a", "inc_b", "inc_c", "goods", "task", "fallen")


@dataclass
class AgentState:
    node: int
    goal: Optional[int] = None
    carrying: int = 0


@dataclass
class DeviceState:
    node: int
    task: Optional[int] = None  # index into state.tasks
    carrying: int = 0
    halted: bool = False
    phase: str = "pickup"  # or "deliver"


@dataclass
class EnvState:
    tick: int
    m_c: np.ndarray
    h_c: np.ndarray
    tasks: list
    omega: list
    incidents: dict  # node -> active Incident
    agents: list
    devices: list
    accumulator: np.ndarray
    goods: np.ndarray
    fallen: np.ndarray
    delivered: int = 0
    completions: list = field(default_factory=list)
    incident_nodes: set = field(default_factory=set)  # every node that hosted an incident
    resolved_nodes: set = field(default_factory=set)
    burned: set = field(default_factory=set)
    sched_pos: int = 0

    @property
    def v_f(self) -> set:
        return set(self.incidents)

    def budget(self) -> np.ndarray:
        return compute_budget(self.accumulator, self.h_c, self.m_c)

    def total_goods(self) -> int:
        return int(
            self.goods.sum()
            + self.fallen.sum()
            + sum(a.carrying for a in self.agents)
            + sum(d.carrying for d in self.devices)
            + self.delivered
        )

    def to_dict(self) -> dict:
        """Canonical plain-data view, used for equality checks and logs."""
        return {
            "tick": self.tick,
            "m_c": self.m_c.tolist(),
            "h_c": self.h_c.tolist(),
            "t_n": [t.t_n for t in self.tasks],
            "omega": list(self.omega),
            "incidents": {
                str(n): [i.type, list(i.probs), i.damage, i.work] for n, i in sorted(self.incidents.items())
            },
            "agents": [[a.node, a.goal, a.carrying] for a in self.agents],
            "devices": [[d.node, d.task, d.carrying, d.halted, d.phase] for d in self.devices],
            "accumulator": self.accumulator.tolist(),
            "goods": self.goods.tolist(),
            "fallen": self.fallen.tolist(),
            "delivered": self.delivered,
            "completions": list(self.completions),
            "incident_nodes": sorted(self.incident_nodes),
            "resolved_nodes": sorted(self.resolved_nodes),
        }


@dataclass(frozen=True)
class Observation:
    window: np.ndarray  # (n, n, N_CHANNELS)
    scalars: np.ndarray  # (N_SCALARS,)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.window.ravel(), self.scalars])


@dataclass(frozen=True)
class Transition:
    """Reward-relevant events of one tick."""

    succ: np.ndarray  # per agent: +1 resolved, -1 failed attempt, 0 otherwise
    work: int  # tasks completed minus tasks failed this tick
    loss: float  # sum of loss_reward over active type-c incidents
    has_c: bool  # whether any type-c incident is active


def reward_components(tr: Transition, rc: RewardConstants) -> np.ndarray:
    """Per-agent (R_succ, R_work, R_loss) as a (agents, 3) array."""
    k = len(tr.succ)
    out = np.empty((k, 3))
    out[:, 0] = rc.r_s * tr.succ
    out[:, 1] = rc.r_w * tr.work
    out[:, 2] = rc.loss_sign * tr.loss
    return out


def reward(tr: Transition, w: RewardConstants) -> np.ndarray:
    gamma = w.gamma if tr.has_c else 0.0
    return reward_components(tr, w) @ np.array([w.alpha, w.beta, gamma])


def task_progress(state: EnvState) -> dict:
    counts = {s: 0 for s in TASK_STATUSES}
    for s in state.omega:
        counts[s] += 1
    counts["completions"] = list(state.completions)
    return counts


class WarehouseEnv:
    """Warehouse incident-response CMDP over a fixed scenario."""

    def __init__(self, scenario: Scenario, check_conservation: bool = True):
        scenario.validate()
        self.scenario = scenario
        self.g = scenario.op_graph
        self.const = scenario.constants
        self.check_conservation = check_conservation
        self.n_agents = scenario.n_agents
        self.n_devices = scenario.n_devices
        self.window = self.const.window
        xs = [c[0] for c in self.g.coords]
        ys = [c[1] for c in self.g.coords]
        self.x0, self.y0 = min(xs), min(ys)
        self.width, self.height = max(xs) - self.x0 + 1, max(ys) - self.y0 + 1
        self._assign = self._assign_tasks()
        self._path_cache: dict = {}
        self.state: Optional[EnvState] = None
        self.events: list = []
        self._snap: Optional[Snapshot] = None

    # ------------------------------------------------------------------ setup
    def _assign_tasks(self) -> dict:
        """Device index responsible for each task id."""
        dev_index = {d: k for k, d in enumerate(self.scenario.device_ids)}
        out = {}
        for t in self.scenario.tasks:
            owner = self.g.device_id[t.node]
            if owner is not None and owner in dev_index:
                out[t.id] = dev_index[owner]
            elif self.n_devices:
                tx, ty = self.g.coords[t.node]

                def dist(k):
                    x, y = self.g.coords[self.scenario.device_starts[k]]
                    return abs(x - tx) + abs(y - ty), k

                out[t.id] = min(range(self.n_devices), key=dist)
        return out

    def reset(self, seed: Optional[int] = None) -> EnvState:
        sc = self.scenario
        seed = sc.rng_seed if seed is None else seed
        self.rng = np.random.default_rng(seed)
        n = self.window
        k = self.n_agents
        tasks = [replace(t) for t in sc.tasks]
        self.state = EnvState(
            tick=0,
            m_c=np.ones((k, n, n), dtype=np.int64),
            h_c=np.full(k, self.const.h_c, dtype=np.int64),
            tasks=tasks,
            omega=[PENDING] * len(tasks),
            incidents={},
            agents=[AgentState(node=s) for s in sc.agent_starts],
            devices=[DeviceState(node=s) for s in sc.device_starts],
            accumulator=np.zeros((k, n, n), dtype=np.int64),
            goods=np.array(self.g.w, dtype=np.int64),
            fallen=np.zeros(self.g.n_nodes, dtype=np.int64),
            completions=[0] * self.n_devices,
        )
        self._total0 = self.state.total_goods()
        self._task_index = {t.id: i for i, t in enumerate(tasks)}
        self._queues = [
            [self._task_index[t.id] for t in task_queue_order(tasks) if self._assign.get(t.id) == d]
            for d in range(self.n_devices)
        ]
        self._snap = None
        self.events = []
        self._update_halts()
        self._assign_goals()
        return self.state

    def set_constraints(self, m_c: np.ndarray, h_c) -> None:
        s = self.state
        m_c = np.asarray(m_c, dtype=np.int64)
        if m_c.shape != s.m_c.shape:
            raise ValueError(f"constraint matrix shape {m_c.shape} != {s.m_c.shape}")
        h_c = np.broadcast_to(np.asarray(h_c, dtype=np.int64), s.h_c.shape).copy()
        if np.any(h_c < 0):
            raise ValueError("h_c must be non-negative")
        s.m_c, s.h_c = m_c, h_c

    # ------------------------------------------------------------ geometry
    def manhattan(self, a: int, b: int) -> int:
        (ax, ay), (bx, by) = self.g.coords[a], self.g.coords[b]
        return abs(ax - bx) + abs(ay - by)

    def _path(self, a: int, b: int, blocked: frozenset):
        key = (a, b, blocked)
        if key not in self._path_cache:
            if len(self._path_cache) > 50000:
                self._path_cache.clear()
            self._path_cache[key] = shortest_path(self.g, a, b, blocked)
        return self._path_cache[key]

    def _device_blocked(self) -> frozenset:
        return frozenset(n for n, i in self.state.incidents.items() if i.type in ("b", "c"))

    def _device_target(self, dev: DeviceState) -> Optional[int]:
        if dev.task is None:
            return None
        t = self.state.tasks[dev.task]
        return t.node if dev.phase == "pickup" else t.ga

    def _device_next(self, dev: DeviceState, blocked: frozenset) -> Optional[int]:
        target = self._device_target(dev)
        if target is None or target == dev.node or target in blocked:
            return None
        res = self._path(dev.node, target, blocked)
        if res is None:
            return None
        return res[0][1]

    # ------------------------------------------------------------ snapshot
    def snapshot(self) -> Snapshot:
        """Constraint view of the current (pre-step) state."""
        if self._snap is None:
            s = self.state
            blocked = self._device_blocked()
            running, critical = [], set()
            for d in s.devices:
                if d.halted:
                    continue
                running.append(d.node)
                if d.task is not None and not check_time(s.tasks[d.task], 1):
                    nxt = self._device_next(d, blocked)
                    if nxt is not None:
                        critical.add(nxt)
            fire = frozenset(n for n, i in s.incidents.items() if i.type == "c")
            self._snap = Snapshot(
                g=self.g,
                agent_nodes=tuple(a.node for a in s.agents),
                running_devices=tuple(running),
                critical_cells=frozenset(critical),
                fire_nodes=fire,
                d_safe=self.const.d_safe,
                window=self.window,
            )
        return self._snap

    # ------------------------------------------------------------ step
    def step(self, joint_action: Sequence[int]):
        s = self.state
        if s is None:
            raise RuntimeError("call reset() before step()")
        joint_action = [int(a) for a in joint_action]
        if len(joint_action) != self.n_agents:
            raise ValueError(f"expected {self.n_agents} actions, got {len(joint_action)}")
        for a in joint_action:
            if not 0 <= a < N_ACTIONS:
                raise ValueError(f"malformed action index {a}")
        snap = self.snapshot()
        now = s.tick
        self.events = [{"tick": now, "kind": "step", "actions": joint_action}]
        k = self.n_agents
        succ = np.zeros(k, dtype=np.int64)
        decoded = [decode_action(a) for a in joint_action]

        # (1) agent moves, then drop carried goods on incident-free nodes
        for ag, (mv, _) in zip(s.agents, decoded):
            ag.node = snap.move_node(ag.node, mv)
            if ag.carrying and ag.node not in s.incidents:
                s.goods[ag.node] += ag.carrying
                ag.carrying = 0

        # (2) responses
        responders: dict[int, list[int]] = {}
        for i, (ag, (_, rsp)) in enumerate(zip(s.agents, decoded)):
            if rsp == 0:
                continue
            kind = RESPONSE_TYPE[rsp]
            target = None
            for v in (ag.node,) + tuple(u for u, _ in self.g.neighbors[ag.node]):
                inc = s.incidents.get(v)
                if inc is not None and inc.type == kind:
                    target = v
                    break
            if target is None:
                succ[i] -= 1
                self.events.append({"tick": now, "kind": "response_failed", "agent": i, "respond": kind})
                continue
            if kind == "b":
                room = self.const.carry_capacity - ag.carrying
                if not check_resource([1], [room]):
                    succ[i] -= 1
                    self.events.append({"tick": now, "kind": "response_failed", "agent": i, "respond": kind})
                    continue
                if s.fallen[target] > 0:
                    s.fallen[target] -= 1
                    ag.carrying += 1
            responders.setdefault(target, []).append(i)
        for node in sorted(responders):
            who = responders[node]
            inc = s.incidents[node]
            inc = replace(inc, work=inc.work + 1)
            if inc.work >= response_time(self.const.ct[inc.type], len(who)):
                inc = replace(apply_response(inc, self.const.response_effect[inc.type]), work=0)
            if inc.active:
                s.incidents[node] = inc
                continue
            del s.incidents[node]
            s.resolved_nodes.add(node)
            for i in who:
                succ[i] += 1
            if inc.type == "b":
                s.goods[node] += s.fallen[node]
                s.fallen[node] = 0
            self.events.append({"tick": now, "kind": "incident", "event": "resolve", "node": node, "type": inc.type})
        self._update_halts()

        # (3) devices
        completed = failed = 0
        blocked = self._device_blocked()
        agent_nodes = {a.node for a in s.agents}
        for d_idx, dev in enumerate(s.devices):
            if dev.halted:
                continue
            if dev.task is None:
                while self._queues[d_idx]:
                    ti = self._queues[d_idx].pop(0)
                    if s.omega[ti] == PENDING:
                        dev.task, dev.phase = ti, "pickup"
                        s.omega[ti] = IN_PROGRESS
                        break
                if dev.task is None:
                    continue
            task = s.tasks[dev.task]
            target = self._device_target(dev)
            if dev.node != target:
                nxt = self._device_next(dev, blocked)
                if nxt is not None and nxt not in agent_nodes:
                    dev.node = nxt
            if dev.phase == "pickup" and dev.node == task.node:
                if s.goods[dev.node] >= task.num:
                    s.goods[dev.node] -= task.num
                    dev.carrying = task.num
                    dev.phase = "deliver"
            elif dev.phase == "deliver" and dev.node == task.ga:
                s.delivered += dev.carrying
                dev.carrying = 0
                if s.omega[dev.task] == IN_PROGRESS and now + 1 <= task.t_d:
                    s.omega[dev.task] = DONE
                    s.completions[d_idx] += 1
                    completed += 1
                    self.events.append({"tick": now, "kind": "task", "event": "done", "task": task.id})
                dev.task = None

        # (4) incident schedule, spread, damage
        sched = self.scenario.incident_schedule
        while s.sched_pos < len(sched) and sched[s.sched_pos].tick <= now:
            e = sched[s.sched_pos]
            s.sched_pos += 1
            if e.node in s.incidents:
                continue
            inc = new_incident(now, e.node, e.type, e.severity, e.lam)
            if not should_trigger(inc.probs):
                continue
            self._ignite(inc, "trigger")
        new = step_spread(
            self.g, list(s.incidents.values()), self.rng, now, self.const.p_spread,
            self.const.spread_severity, self.const.lam, s.burned,
        )
        for inc in new:
            self._ignite(inc, "spread")
        for node, inc in s.incidents.items():
            if inc.type == "c":
                s.incidents[node] = damage_step(inc, 1)
        self._update_halts()

        # (5) task statuses and time spent
        for ti, t in enumerate(s.tasks):
            if s.omega[ti] == IN_PROGRESS:
                s.tasks[ti] = replace(t, t_n=t.t_n + 1)
            if s.omega[ti] in (PENDING, IN_PROGRESS) and now + 1 > t.t_d:
                s.omega[ti] = FAILED
                failed += 1
                self.events.append({"tick": now, "kind": "task", "event": "failed", "task": t.id})
        for dev in s.devices:
            if dev.task is not None and s.omega[dev.task] == FAILED and dev.phase == "pickup":
                dev.task = None

        # (6) rewards
        active_c = [i for i in s.incidents.values() if i.type == "c"]
        tr = Transition(
            succ=succ,
            work=completed - failed,
            loss=float(sum(loss_reward(i) for i in active_c)),
            has_c=bool(active_c),
        )
        rewards = reward(tr, self.const.reward)

        # (7) violation accumulator
        cost, viol = violation_cost(snap, joint_action)
        s.accumulator += cost
        for i, row, col, kind in viol:
            self.events.append({"tick": now, "kind": "violation", "agent": i, "cell": [row, col], "constraint": kind})

        s.tick = now + 1
        self._snap = None
        self._assign_goals()
        if self.check_conservation:
            total = s.total_goods()
            if total != self._total0:  # explicit raise so python -O keeps the check
                raise AssertionError(f"goods not conserved: {total} != {self._total0}")
        terminal = all(o in (DONE, FAILED) for o in s.omega) and not s.incidents
        done = terminal or s.tick >= self.const.horizon
        info = {
            "transition": tr,
            "violations": int(cost.sum()),
            "events": self.events,
            "progress": task_progress(s),
        }
        return s, rewards, done, info

    def _ignite(self, inc, how: str) -> None:
        s = self.state
        s.incidents[inc.node] = inc
        s.incident_nodes.add(inc.node)
        if inc.type == "c":
            s.burned.add(inc.node)
        if inc.type == "b":
            drop = min(int(s.goods[inc.node]), self.const.fallen_goods)
            s.goods[inc.node] -= drop
            s.fallen[inc.node] += drop
        self.events.append({"tick": s.tick, "kind": "incident", "event": how, "node": inc.node, "type": inc.type})

    def _update_halts(self) -> None:
        s = self.state
        areas = {self.g.device_id[n] for n, i in s.incidents.items() if i.type == "a"}
        for dev_id, dev in zip(self.scenario.device_ids, s.devices):
            dev.halted = dev_id in areas

    def _assign_goals(self) -> None:
        """Greedy: in id order, each agent claims its nearest unclaimed incident."""
        s = self.state
        free = sorted(s.incidents)
        for ag in s.agents:
            if not free:
                ag.goal = None
                continue
            best = min(free, key=lambda v: (self.manhattan(ag.node, v), v))
            ag.goal = best
            if len(free) > 1:
                free.remove(best)

    # ------------------------------------------------------------ views
    def _grid_channels(self) -> np.ndarray:
        """Padded (H + 2r, W + 2r, 6) map of the entity channels."""
        s = self.state
        r = self.window // 2
        grid = np.zeros((self.height + 2 * r, self.width + 2 * r, CH_GOODS + 1))
        coords = self.g.coords

        def put(node, ch):
            x, y = coords[node]
            grid[y - self.y0 + r, x - self.x0 + r, ch] = 1.0

        for d in s.devices:
            put(d.node, CH_DEVICE)
        for a in s.agents:
            put(a.node, CH_AGENT)
        for n, inc in s.incidents.items():
            put(n, CH_INC_A + "abc".index(inc.type))
        for n in np.flatnonzero((s.goods > 0) | (s.fallen > 0)):
            put(int(n), CH_GOODS)
        return grid

    def _window_of(self, grid: np.ndarray, i: int) -> np.ndarray:
        s = self.state
        n, r = self.window, self.window // 2
        x, y = self.g.coords[s.agents[i].node]
        gy, gx = y - self.y0, x - self.x0
        win = np.zeros((n, n, N_CHANNELS))
        win[:, :, : CH_GOODS + 1] = grid[gy : gy + n, gx : gx + n]
        # an agent does not see itself in the agent channel
        win[r, r, CH_AGENT] = float(sum(a.node == s.agents[i].node for a in s.agents) > 1)
        # zero the constraint channels on out-of-map cells
        inside = np.zeros((n, n), dtype=bool)
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                inside[dy + r, dx + r] = (x + dx, y + dy) in self.g.index
        win[:, :, CH_MC] = s.m_c[i] * inside
        win[:, :, CH_B] = np.clip(s.budget()[i], -5, 5) / 5.0 * inside
        return win

    def _scalars(self, i: int) -> np.ndarray:
        s = self.state
        ag = s.agents[i]
        out = np.zeros(N_SCALARS)
        out[0] = s.h_c[i] / 10.0
        out[1] = s.tick / self.const.horizon
        if ag.goal is not None:
            (ax, ay), (gx, gy) = self.g.coords[ag.node], self.g.coords[ag.goal]
            out[2] = (gx - ax) / self.width
            out[3] = (gy - ay) / self.height
            out[4] = 1.0
        return out

    def observe(self, agent_id: int) -> Observation:
        if not 0 <= agent_id < self.n_agents:
            raise IndexError(f"no agent {agent_id}")
        grid = self._grid_channels()
        return Observation(self._window_of(grid, agent_id), self._scalars(agent_id))

    def observe_all(self) -> np.ndarray:
        """Flat observations of every agent, shape (agents, obs_dim)."""
        grid = self._grid_channels()
        return np.stack(
            [np.concatenate([self._window_of(grid, i).ravel(), self._scalars(i)]) for i in range(self.n_agents)]
        )

    @property
    def obs_dim(self) -> int:
        return self.window * self.window * N_CHANNELS + N_SCALARS

    def graph_features(self) -> np.ndarray:
        """Per-node features of the operation graph, shape (nodes, 9)."""
        s = self.state
        f = np.zeros((self.g.n_nodes, len(NODE_FEATURES)))
        for d in s.devices:
            f[d.node, 1 if d.halted else 0] = 1.0
        for a in s.agents:
            f[a.node, 2] = 1.0
        for n, inc in s.incidents.items():
            f[n, 3 + "abc".index(inc.type)] = 1.0
        f[:, 6] = s.goods > 0
        for ti, t in enumerate(s.tasks):
            if s.omega[ti] in (PENDING, IN_PROGRESS) and t.t_d >= s.tick:
                f[t.node, 7] = 1.0
        f[:, 8] = s.fallen > 0
        return f

    def episode_summary(self, agent_returns: Sequence[float]) -> dict:
        """Inputs of the four evaluation metrics for the finished episode."""
        s = self.state
        return {
            "completions": list(s.completions),
            "n_tasks": len(s.tasks),
            "n_devices": self.n_devices,
            "n_vf": len(s.incident_nodes),
            "n_nodes": self.g.n_nodes,
            "n_resolved": len(s.resolved_nodes & s.incident_nodes),
            "agent_returns": [float(r) for r in agent_returns],
            "ticks": s.tick,
            "violations": int(s.accumulator.sum()),
        }


def time_to_complete(state: EnvState) -> float:
    """Sum over finished tasks of 1/ticks-spent, an auxiliary throughput figure."""
    return float(sum(1.0 / max(t.t_n, 1) for t, o in zip(state.tasks, state.omega) if o == DONE))


__all__ = [
    "AgentState",
    "DeviceState",
    "EnvState",
    "Observation",
    "Transition",
    "WarehouseEnv",
    "reward",
    "reward_components",
    "task_progress",
    "time_to_complete",
]
