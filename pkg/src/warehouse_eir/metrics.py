"""Evaluation indicators, rolling averages and variant comparison."""
from __future__ import annotations

from typing import Iterable, Mapping, Sequence

import numpy as np

METRIC_FIELDS = ("episode", "R", "rate_s", "rate_s_alt", "rate_f", "rate_sf", "no_incidents", "violations", "ticks")
CURVE_FIELDS = ("R", "rate_s", "rate_sf", "rate_f")


def metric_reward(totals: Sequence[float]) -> float:
    """Mean of the per-agent episode totals."""
    if len(totals) == 0:
        raise ValueError("need at least one agent")
    return float(sum(totals) / len(totals))


def metric_rate_s(completions: Sequence[int], n_o: int, n_devices: int) -> float:
    """Completed operations over n_O * N, with n_O the total operation count."""
    if n_o < 1 or n_devices < 1:
        raise ValueError("n_O and N must be positive")
    return float(sum(completions) / (n_o * n_devices))


def metric_rate_f(n_vf: int, n_v: int) -> float:
    if n_v < 1:
        raise ValueError("graph has no nodes")
    return n_vf / n_v


def metric_rate_sf(n_resolved: int, n_vf: int) -> tuple[float, bool]:
    """Returns (rate, no_incidents flag); 0 when nothing happened."""
    if n_vf == 0:
        return 0.0, True
    return n_resolved / n_vf, False


def episode_metrics(episode: int, summary: Mapping) -> dict:
    """One metrics row from ``WarehouseEnv.episode_summary`` output."""
    rate_sf, flag = metric_rate_sf(summary["n_resolved"], summary["n_vf"])
    n_tasks = summary["n_tasks"]
    return {
        "episode": episode,
        "R": metric_reward(summary["agent_returns"]),
        "rate_s": metric_rate_s(summary["completions"], max(n_tasks, 1), summary["n_devices"]),
        "rate_s_alt": sum(summary["completions"]) / n_tasks if n_tasks else 0.0,
        "rate_f": metric_rate_f(summary["n_vf"], summary["n_nodes"]),
        "rate_sf": rate_sf,
        "no_incidents": int(flag),
        "violations": summary["violations"],
        "ticks": summary["ticks"],
    }


def rolling_average(rows: Sequence[Mapping], window: int = 15, fields: Iterable[str] = CURVE_FIELDS) -> list[dict]:
    """Block means over consecutive, complete windows of ``window`` episodes."""
    if window < 1:
        raise ValueError("window must be positive")
    fields = tuple(fields)
    out = []
    for start in range(0, len(rows) - window + 1, window):
        block = rows[start : start + window]
        rec = {"episode_end": block[-1]["episode"]}
        for f in fields:
            rec[f] = float(np.mean([r[f] for r in block]))
        out.append(rec)
    return out


def final_summary(rows: Sequence[Mapping], frac: float = 0.1) -> dict:
    """Means over the last ``frac`` of episodes (at least one)."""
    if not rows:
        return {}
    k = max(1, int(round(len(rows) * frac)))
    tail = rows[-k:]
    out = {"episodes_averaged": k}
    for f in ("R", "rate_s", "rate_s_alt", "rate_f", "rate_sf", "violations"):
        out[f] = float(np.mean([float(r[f]) for r in tail]))
    return out


# higher is better for these; rate_f is a loss
_DIRECTION = {"rate_s": 1, "rate_sf": 1, "R": 1, "rate_f": -1}


def compare_variants(summaries: Mapping[str, Mapping], order: Sequence[str] = ("EI", "C", "base")) -> dict:
    """Check EI >= C >= base on the gains (<= on rate_f) with deltas."""
    missing = [v for v in order if v not in summaries]
    if missing:
        raise ValueError(f"missing summaries for {missing}")
    scen = {summaries[v].get("scenario") for v in order}
    if len(scen) > 1:
        raise ValueError("summaries come from different scenarios")
    report = {}
    for metric, sign in _DIRECTION.items():
        vals = [float(summaries[v][metric]) for v in order]
        deltas = [vals[i] - vals[i + 1] for i in range(len(vals) - 1)]
        if all(d == 0 for d in deltas):
            verdict = "tie"
        elif all(sign * d >= 0 for d in deltas):
            verdict = "consistent with paper"
        else:
            verdict = "inconsistent"
        report[metric] = {"values": dict(zip(order, vals)), "deltas": deltas, "verdict": verdict}
    return report
