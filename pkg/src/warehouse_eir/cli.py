"""Command line entry point: ``warehouse-eir <subcommand>``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .extractor import ConstraintExtractor, ExtractorDataset, generate_dataset, save_extractor
from .harness import ExperimentConfig, run_experiment, run_grid
from .layouts import make_layout
from .learners.maddpg import VARIANTS
from .runlog import replay_runlog
from .scenario import LAYOUTS, load_scenario


def _scenario(args):
    if getattr(args, "scenario", None):
        return load_scenario(args.scenario)
    return make_layout(args.layout, args.agents, args.incidents, seed=0)


def _add_scenario_flags(p):
    p.add_argument("--layout", choices=LAYOUTS, default="A")
    p.add_argument("--agents", type=int, default=3)
    p.add_argument("--incidents", type=int, default=6)
    p.add_argument("--scenario", help="scenario JSON file (overrides --layout/--agents/--incidents)")


def cmd_run(args) -> int:
    train = json.loads(Path(args.train_config).read_text()) if args.train_config else {}
    cfg = ExperimentConfig(args.layout, args.agents, args.incidents, args.variant, args.episodes, args.seed,
                           args.rolling, args.free_form, args.scenario, args.extractor, train=train)
    summary = run_experiment(cfg, args.out, plots=not args.no_plots)
    print(json.dumps(summary["final"], indent=2, sort_keys=True))
    return 0


def cmd_grid(args) -> int:
    rows = run_grid(args.out, args.episodes, args.seed, layouts=args.layouts, variants=args.variants,
                    rolling=args.rolling)
    for r in rows:
        print(f"{r['layout']} {r['agents']}x{r['incidents']} {r['variant']:>4}  "
              f"R={r['R']:.2f} rate_s={r['rate_s']:.3f} rate_f={r['rate_f']:.3f} rate_sf={r['rate_sf']:.3f}")
    return 0


def cmd_dataset(args) -> int:
    ds = generate_dataset(_scenario(args), args.episodes, args.seed)
    ds.save(args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return 0


def cmd_extract_train(args) -> int:
    if args.dataset:
        ds = ExtractorDataset.load(args.dataset)
    else:
        ds = generate_dataset(_scenario(args), args.episodes, args.seed)
    est = ConstraintExtractor(epochs=args.epochs, seed=args.seed).fit(ds)
    save_extractor(est, args.out)
    print(json.dumps(est.metrics_, sort_keys=True))
    return 0


def cmd_replay(args) -> int:
    results = replay_runlog(args.runlog, args.episode or None)
    bad = [r["episode"] for r in results if not r["match"]]
    print(f"replayed {len(results)} episodes, {len(bad)} mismatches")
    for r in results:
        if args.verbose or not r["match"]:
            print(json.dumps(r, sort_keys=True))
    return 1 if bad else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="warehouse-eir", description="Safe multi-agent warehouse incident response.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="train one config and write metrics, summary and plots")
    _add_scenario_flags(p)
    p.add_argument("--variant", choices=VARIANTS, default="EI")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rolling", type=int, default=15)
    p.add_argument("--free-form", action="store_true", help="allow (agents, incidents) outside the standard grid")
    p.add_argument("--extractor", help="trained extractor checkpoint for the EI variant")
    p.add_argument("--train-config", help="JSON file of training hyperparameter overrides")
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("grid", help="run every layout x (agents, incidents) x variant")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rolling", type=int, default=15)
    p.add_argument("--layouts", nargs="+", choices=LAYOUTS, default=list(LAYOUTS))
    p.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("dataset", help="generate a constraint-extractor dataset")
    _add_scenario_flags(p)
    p.add_argument("--episodes", type=int, default=56)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("extract-train", help="train the constraint extractor")
    _add_scenario_flags(p)
    p.add_argument("--dataset", help="dataset file from the dataset subcommand")
    p.add_argument("--episodes", type=int, default=56, help="episodes to generate when no dataset is given")
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_train)

    p = sub.add_parser("replay", help="re-simulate episodes from a run log and check their metrics")
    p.add_argument("runlog")
    p.add_argument("--episode", type=int, action="append", help="episode index (repeatable; default all)")
    p.set_defaults(func=cmd_replay)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
