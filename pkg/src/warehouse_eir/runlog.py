"""JSON-lines run log: a header line with the scenario and config, then one
line per episode with its env seed, executed joint actions and metrics.

Because the simulator is deterministic given its seed, the executed actions
are enough to replay an episode and recompute its metrics.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Optional

from .env import WarehouseEnv
from .metrics import episode_metrics
from .scenario import Scenario, scenario_from_dict, scenario_to_dict

RUNLOG_VERSION = 1


def _line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


class RunLog:
    def __init__(self, path, scenario: Scenario, config: Optional[dict] = None):
        self.path = Path(path)
        self._fh = open(self.path, "w", encoding="utf-8")
        self._fh.write(_line({"runlog": RUNLOG_VERSION, "scenario": scenario_to_dict(scenario),
                              "config": config or {}}))

    def __call__(self, row, record) -> None:
        self._fh.write(_line(record))

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_runlog(path) -> tuple[dict, list]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError("empty run log")
    header = json.loads(lines[0])
    if header.get("runlog") != RUNLOG_VERSION:
        raise ValueError("not a run log (or unsupported version)")
    return header, [json.loads(x) for x in lines[1:]]


def replay_episode(scenario: Scenario, record: dict, env: Optional[WarehouseEnv] = None) -> dict:
    """Re-simulate one logged episode; returns the recomputed metrics row."""
    env = env or WarehouseEnv(scenario)
    env.reset(record["env_seed"])
    returns = [0.0] * env.n_agents
    done = False
    for joint in record["actions"]:
        if done:
            raise ValueError("log has actions after the episode ended")
        _, r, done, _ = env.step(joint)
        returns = [a + float(b) for a, b in zip(returns, r)]
    if not done:
        raise ValueError("log ends before the episode does")
    return episode_metrics(record["episode"], env.episode_summary(returns))


def replay_runlog(path, episodes: Optional[Iterable[int]] = None) -> list[dict]:
    """Replay logged episodes; each result has the logged and replayed rows
    and whether they match exactly."""
    header, records = read_runlog(path)
    scenario = scenario_from_dict(header["scenario"])
    env = WarehouseEnv(scenario)
    wanted = None if episodes is None else set(episodes)
    out = []
    for rec in records:
        if wanted is not None and rec["episode"] not in wanted:
            continue
        row = replay_episode(scenario, rec, env)
        out.append({"episode": rec["episode"], "logged": rec["metrics"], "replayed": row,
                    "match": row == rec["metrics"]})
    return out
