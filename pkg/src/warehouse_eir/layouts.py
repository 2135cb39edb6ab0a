"""Programmatic generator for the three desk-scale warehouse layouts.

Each layout fixes the grid, device motion areas, shelves and drop-off
points. Tasks and the incident schedule are drawn from a seeded generator so
that (layout, agents, incidents, seed) always yields the same scenario.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenario import Scenario, ScenarioError, scenario_from_dict

# severity features are one-dimensional; each response shifts them by EFFECT
EFFECT = [[0.6], [-0.3], [-0.3]]
SEVERITY = {
    "a": {"alpha": [0.0, 0.0, 0.0], "beta": [[1.0], [1.0], [1.0]], "x": [[0.0], [0.5], [0.3]]},
    "b": {"alpha": [0.0, 0.0, 0.0], "beta": [[1.0], [1.0], [1.0]], "x": [[0.0], [0.5], [0.3]]},
    "c": {"alpha": [0.0, 0.0, 0.0], "beta": [[1.0], [1.0], [1.0]], "x": [[0.0], [0.9], [0.5]]},
}


@dataclass(frozen=True)
class LayoutSpec:
    width: int
    height: int
    areas: tuple  # per device: (x0, y0, x1, y1) inclusive
    shelves: tuple  # per device: shelf cells
    outbound: tuple  # per device: drop-off cell
    inbound: tuple  # per device: start cell
    hub: tuple  # hub cells (physical node only)
    agent_starts: tuple
    horizon: int


def _cells(x0, y0, x1, y1):
    return tuple((x, y) for y in range(y0, y1 + 1) for x in range(x0, x1 + 1))


LAYOUT_SPECS = {
    # two devices, left and right halves, shelf columns in each half
    "A": LayoutSpec(
        width=10, height=10,
        areas=((0, 0, 4, 9), (5, 0, 9, 9)),
        shelves=(tuple((x, y) for x in (1, 3) for y in range(2, 8)),
                 tuple((x, y) for x in (6, 8) for y in range(2, 8))),
        outbound=((2, 9), (7, 9)),
        inbound=((2, 0), (7, 0)),
        hub=((4, 5), (5, 5)),
        agent_starts=((0, 0), (4, 0), (9, 0), (0, 9)),
        horizon=60,
    ),
    # three narrow vertical aisles
    "B": LayoutSpec(
        width=12, height=8,
        areas=((0, 0, 3, 7), (4, 0, 7, 7), (8, 0, 11, 7)),
        shelves=(tuple((x, y) for x in (1,) for y in range(2, 6)),
                 tuple((x, y) for x in (5,) for y in range(2, 6)),
                 tuple((x, y) for x in (9,) for y in range(2, 6))),
        outbound=((2, 7), (6, 7), (10, 7)),
        inbound=((2, 0), (6, 0), (10, 0)),
        hub=((3, 4), (7, 4)),
        agent_starts=((0, 0), (4, 0), (11, 0), (0, 7)),
        horizon=60,
    ),
    # top and bottom halves with horizontal shelf rows
    "C": LayoutSpec(
        width=10, height=10,
        areas=((0, 0, 9, 4), (0, 5, 9, 9)),
        shelves=(tuple((x, y) for y in (2,) for x in range(2, 8)),
                 tuple((x, y) for y in (7,) for x in range(2, 8))),
        outbound=((9, 3), (9, 6)),
        inbound=((0, 1), (0, 8)),
        hub=((5, 4), (5, 5)),
        agent_starts=((0, 4), (4, 0), (9, 9), (4, 9)),
        horizon=60,
    ),
}

STANDARD_GRID = ((2, 4), (3, 6), (4, 8))


def make_layout_dict(
    layout: str,
    n_agents: int = 3,
    n_incidents: int = 6,
    seed: int = 0,
    tasks_per_device: int = 4,
    **constants,
) -> dict:
    """Scenario document for ``layout`` (see ``scenario_from_dict``)."""
    if layout not in LAYOUT_SPECS:
        raise ScenarioError(f"unknown layout {layout!r}")
    spec = LAYOUT_SPECS[layout]
    if not 1 <= n_agents <= len(spec.agent_starts):
        raise ScenarioError(f"layout {layout} supports 1..{len(spec.agent_starts)} agents")
    rng = np.random.default_rng(seed)

    nodes, edges = [], []
    for d, shelf in enumerate(spec.shelves):
        nodes.append({"id": f"shelf{d}", "class": "shelf", "w": 4, "cells": [list(c) for c in shelf]})
        nodes.append({"id": f"in{d}", "class": "inbound", "w": 0, "cells": [list(spec.inbound[d])]})
        nodes.append({"id": f"out{d}", "class": "outbound", "w": 0, "cells": [list(spec.outbound[d])]})
    nodes.append({"id": "hub", "class": "hub", "w": 0, "cells": [list(c) for c in spec.hub]})
    hx, hy = spec.hub[0]
    for n in nodes[:-1]:
        cx, cy = n["cells"][0]
        edges.append({"i": "hub", "j": n["id"], "d": float(abs(cx - hx) + abs(cy - hy) or 1)})

    def manhattan(a, b):
        return abs(a[0] - b[0]) + abs(a[1] - b[1])

    tasks, tid = [], 0
    for d, shelf in enumerate(spec.shelves):
        picks = rng.choice(len(shelf), size=tasks_per_device, replace=len(shelf) < tasks_per_device)
        out = spec.outbound[d]
        # t_e is the round trip from the drop-off; deadlines follow queue order
        jobs = sorted((2 * manhattan(shelf[int(p)], out) + 1, shelf[int(p)]) for p in picks)
        clock = manhattan(spec.inbound[d], out)
        for t_e, src in jobs:
            clock += t_e
            tasks.append({"id": tid, "node": list(src), "ga": list(out),
                          "t_e": t_e, "t_d": clock + 6, "t_n": 0, "num": 1})
            tid += 1

    starts = set(spec.agent_starts[:n_agents]) | set(spec.inbound)
    all_cells = _cells(0, 0, spec.width - 1, spec.height - 1)
    shelf_cells = [c for s in spec.shelves for c in s]
    free = [c for c in all_cells if c not in starts and c not in spec.outbound]
    types = ["abc"[i % 3] for i in range(n_incidents)]
    ticks = sorted(int(t) for t in rng.integers(1, max(2, spec.horizon // 3), size=n_incidents))
    used: set = set()
    incidents = []
    for tick, typ in zip(ticks, types):
        pool = [c for c in (shelf_cells if typ == "b" else free) if c not in used]
        c = pool[int(rng.integers(len(pool)))]
        used.add(c)
        incidents.append({"tick": tick, "node": list(c), "type": typ,
                          "lambda": 0.1 if typ == "c" else 0.0, **SEVERITY[typ]})

    const = {
        "d_safe": 2.0,
        "ct": {"a": 2, "b": 2, "c": 2},
        "lambda": 0.1,
        "p_spread": 0.04,
        "spread_severity": SEVERITY["c"],
        "response_effect": {t: EFFECT for t in "abc"},
        "fallen_goods": 2,
        "carry_capacity": 2,
        "h_c": 2,
        "horizon": spec.horizon,
        "window": 5,
    }
    const.update(constants)
    return {
        "layout": layout,
        "seed": int(seed),
        "grid": {"width": spec.width, "height": spec.height},
        "physical": {"nodes": nodes, "edges": edges},
        "devices": [{"id": d, "start": list(spec.inbound[d]), "area": [list(c) for c in _cells(*a)]}
                    for d, a in enumerate(spec.areas)],
        "agents": [{"id": i, "start": list(spec.agent_starts[i])} for i in range(n_agents)],
        "tasks": tasks,
        "incidents": incidents,
        "constants": const,
    }


def make_layout(layout: str, n_agents: int = 3, n_incidents: int = 6, seed: int = 0, **kw) -> Scenario:
    return scenario_from_dict(make_layout_dict(layout, n_agents, n_incidents, seed, **kw))
