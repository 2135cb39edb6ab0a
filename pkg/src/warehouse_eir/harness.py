"""Experiment runner: one training run per config, the layout x (agents,
incidents) x variant grid, CSV/JSON outputs and metric plots."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .extractor import (
    ConstraintExtractor,
    generate_dataset,
    load_extractor,
    save_extractor,
    scenario_hash,
)
from .layouts import STANDARD_GRID, make_layout
from .learners.maddpg import VARIANTS, TrainConfig, canonical_variant, train
from .metrics import CURVE_FIELDS, METRIC_FIELDS, compare_variants, final_summary, rolling_average
from .runlog import RunLog
from .scenario import LAYOUTS, Scenario, load_scenario

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    layout: str = "A"
    n_agents: int = 3
    n_incidents: int = 6
    variant: str = "EI"
    episodes: int = 100
    seed: int = 0
    rolling: int = 15
    free_form: bool = False
    scenario_path: Optional[str] = None
    extractor_path: Optional[str] = None
    extractor_episodes: int = 56  # about 10k samples with 3 agents
    extractor_epochs: int = 15
    train: dict = field(default_factory=dict)  # TrainConfig overrides

    def validate(self) -> "ExperimentConfig":
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}")
        self.variant = canonical_variant(self.variant)
        if (self.n_agents, self.n_incidents) not in STANDARD_GRID and not self.free_form:
            raise ValueError(f"(agents, incidents) must be one of {STANDARD_GRID} unless free_form is set")
        if self.n_agents < 1 or self.n_incidents < 0:
            raise ValueError("need at least one agent and a non-negative incident count")
        if self.episodes < 0 or self.rolling < 1:
            raise ValueError("episodes must be >= 0 and rolling >= 1")
        self.train_config()
        return self

    def train_config(self) -> TrainConfig:
        return TrainConfig(variant=self.variant, episodes=self.episodes, seed=self.seed, **self.train).validate()

    def scenario(self) -> Scenario:
        if self.scenario_path:
            return load_scenario(self.scenario_path)
        return make_layout(self.layout, self.n_agents, self.n_incidents, seed=0)

    def to_dict(self) -> dict:
        return asdict(self)


def fit_extractor(scenario: Scenario, seed: int, episodes: int = 56, epochs: int = 15) -> ConstraintExtractor:
    """Dataset generation plus extractor training, both seeded from ``seed``."""
    ds = generate_dataset(scenario, episodes, seed)
    return ConstraintExtractor(epochs=epochs, seed=seed).fit(ds)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path, rows: Sequence[dict], fieldnames: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fieldnames)
        for r in rows:
            w.writerow([_fmt(r[f]) for f in fieldnames])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    ints = {"episode", "no_incidents", "violations", "ticks"}
    return [{k: (int(v) if k in ints else float(v)) for k, v in r.items()} for r in rows]


def recompute_summary(metrics_csv) -> dict:
    """Final-window means from the CSV alone."""
    return final_summary(read_metrics_csv(metrics_csv))


def plot_curves(curves: dict, out_dir, title: str = "") -> list[Path]:
    """One PNG per metric; ``curves`` maps a label to rolling-average rows."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    paths = []
    for metric in CURVE_FIELDS:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for label, rows in curves.items():
            ax.plot([r["episode_end"] for r in rows], [r[metric] for r in rows], label=label)
        ax.set_xlabel("episode")
        ax.set_ylabel(metric)
        if title:
            ax.set_title(title)
        if len(curves) > 1:
            ax.legend()
        fig.tight_layout()
        p = out_dir / f"{metric}.png"
        fig.savefig(p, dpi=100, metadata={"Software": None})
        plt.close(fig)
        paths.append(p)
    return paths


def run_experiment(config: ExperimentConfig, out_dir, extractor: Optional[ConstraintExtractor] = None,
                   plots: bool = True) -> dict:
    """Train one config; writes metrics.csv, rolling.csv, summary.json,
    runlog.jsonl and (optionally) metric plots into ``out_dir``."""
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenario = config.scenario()
    tc = config.train_config()
    ex_metrics = None
    if tc.variant == "EI" and config.episodes > 0:
        if extractor is None and config.extractor_path:
            extractor = load_extractor(config.extractor_path)
        if extractor is None:
            log.info("fitting constraint extractor for seed %d", config.seed)
            extractor = fit_extractor(scenario, config.seed, config.extractor_episodes, config.extractor_epochs)
            save_extractor(extractor, out / "extractor.ckpt")
        ex_metrics = extractor.metrics_
    with RunLog(out / "runlog.jsonl", scenario, {"experiment": config.to_dict(), "train": tc.to_dict()}) as rl:
        # with no episodes there is nothing to train (and EI needs no extractor)
        rows = train(tc, scenario, extractor, on_episode=rl).metrics if tc.episodes else []
    write_csv(out / "metrics.csv", rows, METRIC_FIELDS)
    roll = rolling_average(rows, config.rolling)
    write_csv(out / "rolling.csv", roll, ("episode_end",) + CURVE_FIELDS)
    summary = {
        "config": config.to_dict(),
        "train": tc.to_dict(),
        "scenario": scenario_hash(scenario),
        "final": final_summary(rows),
        "extractor": ex_metrics,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if plots and roll:
        plot_curves({tc.variant: roll}, out, f"layout {config.layout}, {tc.variant}")
    return summary


def run_grid(out_dir, episodes: int, seed: int = 0, layouts: Sequence[str] = LAYOUTS,
             grid: Sequence = STANDARD_GRID, variants: Sequence[str] = VARIANTS, rolling: int = 15,
             train: Optional[dict] = None) -> list[dict]:
    """Every layout x (agents, incidents) x variant; writes grid_summary.csv
    and per-scenario ordering reports."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, reports = [], {}
    for layout in layouts:
        for n_agents, n_incidents in grid:
            finals, curves = {}, {}
            for variant in variants:
                cfg = ExperimentConfig(layout, n_agents, n_incidents, variant, episodes, seed, rolling,
                                       train=dict(train or {}))
                sub = out / f"{layout}_{n_agents}x{n_incidents}_{variant}"
                s = run_experiment(cfg, sub, plots=False)
                finals[variant] = {**s["final"], "scenario": s["scenario"]}
                curves[variant] = rolling_average(read_metrics_csv(sub / "metrics.csv"), rolling)
                rows.append({"layout": layout, "agents": n_agents, "incidents": n_incidents, "variant": variant,
                             **{k: s["final"].get(k, float("nan")) for k in
                                ("R", "rate_s", "rate_s_alt", "rate_f", "rate_sf", "violations")}})
            key = f"{layout}_{n_agents}x{n_incidents}"
            if all(v in finals for v in ("EI", "C", "base")) and episodes > 0:
                reports[key] = compare_variants(finals)
            if episodes >= rolling:
                pdir = out / f"{key}_plots"
                pdir.mkdir(exist_ok=True)
                plot_curves(curves, pdir, f"layout {layout}, {n_agents} agents / {n_incidents} incidents")
    write_csv(out / "grid_summary.csv", rows,
              ("layout", "agents", "incidents", "variant", "R", "rate_s", "rate_s_alt", "rate_f", "rate_sf", "violations"))
    (out / "ordering.json").write_text(json.dumps(reports, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return rows
