"""Warehouse graphs, task queues and scenario files.

A scenario couples a physical-space graph (shelves, inbound/outbound areas,
hubs) with a grid operation graph built from device motion areas. The two
graphs are deliberately independent: every scenario file spells out both.
"""
from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import jsonschema

from .incidents import INCIDENT_TYPES, SeverityModel

Coord = tuple[int, int]
NODE_CLASSES = ("shelf", "inbound", "outbound", "hub")
LAYOUTS = ("A", "B", "C")


class ScenarioError(ValueError):
    """Scenario failed validation; the message names the violated invariant."""


class ScenarioParseError(ScenarioError):
    """Scenario file could not be parsed."""


# ---------------------------------------------------------------------------
# physical graph
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhysicalNode:
    id: str
    cls: str
    w: int
    cells: tuple[Coord, ...]


@dataclass(frozen=True)
class PhysicalEdge:
    i: str
    j: str
    d: float


@dataclass(frozen=True)
class PhysicalGraph:
    nodes: tuple[PhysicalNode, ...]
    edges: tuple[PhysicalEdge, ...]

    def validate(self) -> None:
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ScenarioError("physical node ids must be unique")
        for n in self.nodes:
            if n.cls not in NODE_CLASSES:
                raise ScenarioError(f"unknown node class {n.cls!r}")
            if not isinstance(n.w, int) or n.w < 0:
                raise ScenarioError(f"goods count w must be a non-negative integer (node {n.id})")
        known = set(ids)
        adj: dict[str, set[str]] = {i: set() for i in ids}
        for e in self.edges:
            if e.i not in known or e.j not in known:
                raise ScenarioError(f"edge references unknown node ({e.i}, {e.j})")
            if not e.d > 0:
                raise ScenarioError("distance must be positive")
            adj[e.i].add(e.j)
            adj[e.j].add(e.i)
        seen = {ids[0]}
        todo = [ids[0]]
        while todo:
            for nb in adj[todo.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    todo.append(nb)
        if len(seen) != len(ids):
            raise ScenarioError("physical graph must be connected")


# ---------------------------------------------------------------------------
# operation graph
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OperationGraph:
    """Grid graph of device motion areas. Nodes are addressed by integer index."""

    coords: tuple[Coord, ...]
    device_id: tuple[Optional[int], ...]
    w: tuple[int, ...]
    loss_state: tuple[float, ...]
    edges: tuple[tuple[int, int, float], ...]
    index: Mapping[Coord, int] = field(init=False, repr=False, compare=False)
    neighbors: tuple[tuple[tuple[int, float], ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {c: k for k, c in enumerate(self.coords)}
        if len(index) != len(self.coords):
            raise ScenarioError("operation-graph coords must be unique")
        nbrs: list[list[tuple[int, float]]] = [[] for _ in self.coords]
        for i, j, d in self.edges:
            (xi, yi), (xj, yj) = self.coords[i], self.coords[j]
            if abs(xi - xj) + abs(yi - yj) != 1:
                raise ScenarioError("operation-graph edges must join grid-adjacent coords")
            if not d > 0:
                raise ScenarioError("distance must be positive")
            nbrs[i].append((j, d))
            nbrs[j].append((i, d))
        object.__setattr__(self, "index", index)
        object.__setattr__(self, "neighbors", tuple(tuple(sorted(n)) for n in nbrs))

    @property
    def n_nodes(self) -> int:
        return len(self.coords)

    @property
    def bounds(self) -> tuple[int, int, int, int]:
        xs = [c[0] for c in self.coords]
        ys = [c[1] for c in self.coords]
        return min(xs), min(ys), max(xs), max(ys)


def build_operation_graph(
    pg: PhysicalGraph,
    motion_areas: Mapping[Optional[int], Iterable[Coord]],
    edges: Optional[Iterable[tuple[Coord, Coord]]] = None,
) -> OperationGraph:
    """One node per covered coord, unit 4-neighbour edges.

    ``motion_areas`` may carry a ``None`` key for coords no device owns.
    ``edges`` restricts the default full 4-neighbourhood to a subset.
    """
    owner: dict[Coord, Optional[int]] = {}
    for dev in sorted(motion_areas, key=lambda d: (d is None, d if d is not None else 0)):
        for c in motion_areas[dev]:
            c = (int(c[0]), int(c[1]))
            if c in owner:
                raise ScenarioError(f"overlapping motion areas at {c}")
            owner[c] = dev
    if not owner:
        raise ScenarioError("motion areas are empty")
    xs = [c[0] for c in owner]
    ys = [c[1] for c in owner]
    width = max(xs) - min(xs) + 1
    height = max(ys) - min(ys) + 1
    if width * height != len(owner):
        raise ScenarioError("motion areas must tile a rectangular grid region")

    coords = tuple(sorted(owner, key=lambda c: (c[1], c[0])))
    goods = {}
    for n in pg.nodes:
        for c in n.cells:
            goods[tuple(c)] = n.w
    index = {c: k for k, c in enumerate(coords)}
    if edges is None:
        pairs = []
        for (x, y), k in index.items():
            for nb in ((x + 1, y), (x, y + 1)):
                if nb in index:
                    pairs.append((k, index[nb]))
    else:
        pairs = []
        for a, b in edges:
            a, b = tuple(a), tuple(b)
            if a not in index or b not in index:
                raise ScenarioError(f"operation edge {a}-{b} leaves the grid")
            pairs.append((min(index[a], index[b]), max(index[a], index[b])))
    pairs = sorted(set(pairs))
    return OperationGraph(
        coords=coords,
        device_id=tuple(owner[c] for c in coords),
        w=tuple(goods.get(c, 0) for c in coords),
        loss_state=tuple(0.0 for _ in coords),
        edges=tuple((i, j, 1.0) for i, j in pairs),
    )


def shortest_path(
    g: OperationGraph, a: int, b: int, blocked: Optional[Iterable[int]] = None
) -> Optional[tuple[list[int], float]]:
    """Dijkstra over d'. Returns ``None`` when b is unreachable.

    ``path`` runs from ``a`` to ``b`` inclusive and is empty when a == b.
    Nodes in ``blocked`` (other than a and b) are not traversed.
    """
    n = g.n_nodes
    if not (0 <= a < n and 0 <= b < n):
        raise IndexError("node out of range")
    if a == b:
        return [], 0.0
    blocked = set(blocked or ()) - {a, b}
    dist = {a: 0.0}
    prev: dict[int, int] = {}
    heap = [(0.0, a)]
    while heap:
        d, u = heapq.heappop(heap)
        if u == b:
            break
        if d > dist[u]:
            continue
        for v, w in g.neighbors[u]:
            if v in blocked:
                continue
            nd = d + w
            if nd < dist.get(v, float("inf")):
                dist[v] = nd
                prev[v] = u
                heapq.heappush(heap, (nd, v))
    if b not in dist:
        return None
    path = [b]
    while path[-1] != a:
        path.append(prev[path[-1]])
    path.reverse()
    return path, dist[b]


# ---------------------------------------------------------------------------
# tasks and scenarios
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Task:
    id: int
    node: int
    t_d: int
    t_e: int
    t_n: int
    num: int
    ga: int

    def validate(self) -> None:
        if self.t_d <= 0:
            raise ScenarioError(f"task {self.id}: deadline t_d must be positive")
        if self.t_e <= 0:
            raise ScenarioError(f"task {self.id}: expected time t_e must be positive")
        if self.t_n < 0:
            raise ScenarioError(f"task {self.id}: time spent t_n must be non-negative")
        if self.num < 1:
            raise ScenarioError(f"task {self.id}: num must be at least 1")
        if self.node == self.ga:
            raise ScenarioError(f"task {self.id}: node and destination must differ")


def task_queue_order(tasks: Sequence[Task]) -> list[Task]:
    """Single queue by expected completion time, ties by task id."""
    return sorted(tasks, key=lambda t: (t.t_e, t.id))


@dataclass(frozen=True)
class ScheduledIncident:
    tick: int
    node: int
    type: str
    severity: SeverityModel
    lam: float


@dataclass(frozen=True)
class RewardConstants:
    alpha: float = 0.4
    beta: float = 0.3
    gamma: float = 0.3
    r_s: float = 10.0
    r_w: float = 5.0
    loss_sign: int = 1


def _levels(rows) -> tuple[tuple[float, ...], ...]:
    return tuple(tuple(float(v) for v in r) for r in rows)


DEFAULT_SPREAD_SEVERITY = SeverityModel(
    alpha=(0.0, 0.0, 0.0), beta=((1.0,), (1.0,), (1.0,)), x=((0.0,), (1.0,), (0.5,))
)
DEFAULT_RESPONSE_EFFECT = {
    t: ((0.6,), (-0.3,), (-0.3,)) for t in INCIDENT_TYPES
}


@dataclass(frozen=True)
class Constants:
    d_safe: float = 2.0
    ct: Mapping[str, int] = field(default_factory=lambda: {"a": 2, "b": 2, "c": 2})
    lam: float = 0.1
    p_spread: float = 0.02
    spread_severity: SeverityModel = DEFAULT_SPREAD_SEVERITY
    response_effect: Mapping[str, tuple[tuple[float, ...], ...]] = field(
        default_factory=lambda: dict(DEFAULT_RESPONSE_EFFECT)
    )
    fallen_goods: int = 2
    carry_capacity: int = 2
    h_c: int = 2
    horizon: int = 400
    window: int = 5
    reward: RewardConstants = RewardConstants()


@dataclass(frozen=True)
class Scenario:
    layout: str
    physical: PhysicalGraph
    op_graph: OperationGraph
    motion_areas: Mapping[Optional[int], tuple[Coord, ...]]
    tasks: tuple[Task, ...]
    incident_schedule: tuple[ScheduledIncident, ...]
    agent_starts: tuple[int, ...]
    device_starts: tuple[int, ...]
    device_ids: tuple[int, ...]
    rng_seed: int
    constants: Constants
    grid: tuple[int, int]
    op_edges: Optional[tuple[tuple[Coord, Coord], ...]] = None

    @property
    def n_agents(self) -> int:
        return len(self.agent_starts)

    @property
    def n_devices(self) -> int:
        return len(self.device_starts)

    def validate(self) -> None:
        self.physical.validate()
        n = self.op_graph.n_nodes
        for t in self.tasks:
            t.validate()
        if len({t.id for t in self.tasks}) != len(self.tasks):
            raise ScenarioError("task ids must be unique")
        for s in list(self.agent_starts) + list(self.device_starts):
            if not 0 <= s < n:
                raise ScenarioError("agent/device starts must reference valid nodes")
        ticks = [e.tick for e in self.incident_schedule]
        if ticks != sorted(ticks):
            raise ScenarioError("incident schedule ticks must be non-decreasing")
        for e in self.incident_schedule:
            e.severity.validate()
        self.constants.spread_severity.validate()
        dim_ok = {t: len(v[0]) for t, v in self.constants.response_effect.items()}
        for e in self.incident_schedule:
            if e.severity.dim != dim_ok[e.type]:
                raise ScenarioError(f"response effect for type {e.type} must match feature dimension")
        if self.constants.spread_severity.dim != dim_ok["c"]:
            raise ScenarioError("spread severity must match the type-c response effect dimension")
        if self.constants.window % 2 != 1:
            raise ScenarioError("observation window must be odd")
        r = self.constants.reward
        for name in ("alpha", "beta", "gamma"):
            if not 0.0 <= getattr(r, name) <= 1.0:
                raise ScenarioError(f"reward weight {name} must lie in [0, 1]")
        if self.constants.d_safe < 0:
            raise ScenarioError("d_safe must be non-negative")


# ---------------------------------------------------------------------------
# file io
# ---------------------------------------------------------------------------

def scenario_schema() -> dict:
    text = resources.files("warehouse_eir").joinpath("schemas/scenario.schema.json").read_text()
    return json.loads(text)


def _coord(c) -> Coord:
    return int(c[0]), int(c[1])


def _severity_from(d: Mapping) -> SeverityModel:
    return SeverityModel(
        alpha=tuple(float(v) for v in d["alpha"]), beta=_levels(d["beta"]), x=_levels(d["x"])
    )


def _constants_from(d: Mapping) -> Constants:
    base = Constants()
    reward = RewardConstants(**{**base.reward.__dict__, **d.get("reward", {})})
    return Constants(
        d_safe=float(d.get("d_safe", base.d_safe)),
        ct=dict(d.get("ct", base.ct)),
        lam=float(d.get("lambda", base.lam)),
        p_spread=float(d.get("p_spread", base.p_spread)),
        spread_severity=_severity_from(d["spread_severity"]) if "spread_severity" in d else base.spread_severity,
        response_effect={k: _levels(v) for k, v in d["response_effect"].items()}
        if "response_effect" in d else dict(base.response_effect),
        fallen_goods=int(d.get("fallen_goods", base.fallen_goods)),
        carry_capacity=int(d.get("carry_capacity", base.carry_capacity)),
        h_c=int(d.get("h_c", base.h_c)),
        horizon=int(d.get("horizon", base.horizon)),
        window=int(d.get("window", base.window)),
        reward=reward,
    )


def scenario_from_dict(doc: Mapping) -> Scenario:
    try:
        jsonschema.validate(doc, scenario_schema())
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path)
        raise ScenarioError(f"schema violation at '{path}': {exc.message}") from None

    width, height = doc["grid"]["width"], doc["grid"]["height"]
    grid_cells = {(x, y) for x in range(width) for y in range(height)}

    nodes = tuple(
        PhysicalNode(id=n["id"], cls=n["class"], w=n["w"], cells=tuple(_coord(c) for c in n["cells"]))
        for n in doc["physical"]["nodes"]
    )
    for n in nodes:
        if n.w < 0:
            raise ScenarioError(f"goods count w must be a non-negative integer (node {n.id})")
        for c in n.cells:
            if c not in grid_cells:
                raise ScenarioError(f"physical node {n.id} covers {c} outside the grid")
    edges = tuple(PhysicalEdge(e["i"], e["j"], float(e["d"])) for e in doc["physical"]["edges"])
    pg = PhysicalGraph(nodes, edges)
    pg.validate()

    areas: dict[Optional[int], tuple[Coord, ...]] = {}
    covered: set[Coord] = set()
    for dev in doc["devices"]:
        cells = tuple(_coord(c) for c in dev["area"])
        for c in cells:
            if c not in grid_cells:
                raise ScenarioError(f"device {dev['id']} motion area leaves the grid at {c}")
            if c in covered:
                raise ScenarioError(f"overlapping motion areas at {c}")
            covered.add(c)
        areas[int(dev["id"])] = cells
    rest = tuple(sorted(grid_cells - covered, key=lambda c: (c[1], c[0])))
    if rest:
        areas[None] = rest
    op_edges = None
    if "op_edges" in doc:
        op_edges = tuple((_coord(a), _coord(b)) for a, b in doc["op_edges"])
    g = build_operation_graph(pg, areas, op_edges)

    def node_of(c) -> int:
        c = _coord(c)
        if c not in g.index:
            raise ScenarioError(f"coordinate {c} is not an operation-graph node")
        return g.index[c]

    tasks = tuple(
        Task(id=t["id"], node=node_of(t["node"]), t_d=t["t_d"], t_e=t["t_e"], t_n=t["t_n"],
             num=t["num"], ga=node_of(t["ga"]))
        for t in doc["tasks"]
    )
    schedule = tuple(
        ScheduledIncident(tick=e["tick"], node=node_of(e["node"]), type=e["type"],
                          severity=_severity_from(e), lam=float(e["lambda"]))
        for e in doc["incidents"]
    )
    dev_ids = tuple(int(d["id"]) for d in doc["devices"])
    if len(set(dev_ids)) != len(dev_ids):
        raise ScenarioError("device ids must be unique")
    agent_ids = [a["id"] for a in doc["agents"]]
    if agent_ids != list(range(len(agent_ids))):
        raise ScenarioError("agent ids must be 0..n-1 in order")
    sc = Scenario(
        layout=doc["layout"],
        physical=pg,
        op_graph=g,
        motion_areas=areas,
        tasks=tasks,
        incident_schedule=schedule,
        agent_starts=tuple(node_of(a["start"]) for a in doc["agents"]),
        device_starts=tuple(node_of(d["start"]) for d in doc["devices"]),
        device_ids=dev_ids,
        rng_seed=int(doc["seed"]),
        constants=_constants_from(doc.get("constants", {})),
        grid=(width, height),
        op_edges=op_edges,
    )
    sc.validate()
    return sc


def _severity_dict(m: SeverityModel) -> dict:
    return {"alpha": list(m.alpha), "beta": [list(r) for r in m.beta], "x": [list(r) for r in m.x]}


def scenario_to_dict(sc: Scenario) -> dict:
    g = sc.op_graph
    c = sc.constants
    xy = lambda k: list(g.coords[k])  # noqa: E731
    doc = {
        "layout": sc.layout,
        "seed": sc.rng_seed,
        "grid": {"width": sc.grid[0], "height": sc.grid[1]},
        "physical": {
            "nodes": [{"id": n.id, "class": n.cls, "w": n.w, "cells": [list(x) for x in n.cells]}
                      for n in sc.physical.nodes],
            "edges": [{"i": e.i, "j": e.j, "d": e.d} for e in sc.physical.edges],
        },
        "devices": [
            {"id": dev, "start": xy(start), "area": [list(x) for x in sc.motion_areas[dev]]}
            for dev, start in zip(sc.device_ids, sc.device_starts)
        ],
        "agents": [{"id": i, "start": xy(s)} for i, s in enumerate(sc.agent_starts)],
        "tasks": [{"id": t.id, "node": xy(t.node), "t_d": t.t_d, "t_e": t.t_e, "t_n": t.t_n,
                   "num": t.num, "ga": xy(t.ga)} for t in sc.tasks],
        "incidents": [{"tick": e.tick, "node": xy(e.node), "type": e.type, "lambda": e.lam,
                       **_severity_dict(e.severity)} for e in sc.incident_schedule],
        "constants": {
            "d_safe": c.d_safe,
            "ct": dict(sorted(c.ct.items())),
            "lambda": c.lam,
            "p_spread": c.p_spread,
            "spread_severity": _severity_dict(c.spread_severity),
            "response_effect": {k: [list(r) for r in v] for k, v in sorted(c.response_effect.items())},
            "fallen_goods": c.fallen_goods,
            "carry_capacity": c.carry_capacity,
            "h_c": c.h_c,
            "horizon": c.horizon,
            "window": c.window,
            "reward": dict(c.reward.__dict__),
        },
    }
    if sc.op_edges is not None:
        doc["op_edges"] = [[list(a), list(b)] for a, b in sc.op_edges]
    return doc


def dumps_scenario(sc: Scenario) -> str:
    """Canonical text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(scenario_to_dict(sc), sort_keys=True, indent=2) + "\n"


def save_scenario(sc: Scenario, path) -> None:
    Path(path).write_text(dumps_scenario(sc))


def loads_scenario(text: str) -> Scenario:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(f"malformed scenario file: {exc}") from None
    if not isinstance(doc, dict):
        raise ScenarioParseError("malformed scenario file: top level must be an object")
    return scenario_from_dict(doc)


def load_scenario(path) -> Scenario:
    return loads_scenario(Path(path).read_text())


def bundled_scenario_path(layout: str) -> Path:
    if layout not in LAYOUTS:
        raise ScenarioError(f"unknown layout {layout!r}")
    return Path(str(resources.files("warehouse_eir").joinpath(f"data/layout_{layout}.json")))

