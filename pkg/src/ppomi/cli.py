"""Command-line entry point: ``ppomi {world,attack,campaign,evaluate,report}``."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import ExperimentConfig, parse_config, write_effective_config
from .errors import ConfigError, PpoMiError, ResultsIOError
from .evaluation import GridSpec, brute_force_optimum, emit_plot_data, read_results, write_results, evaluate_outcome
from .harness import METHODS, aggregate, load_outcomes, run_campaign, write_campaign, write_results_csv, write_summary
from .numkit import derive_seed
from .worldgen import build_world, load_world, save_world

OUTPUT_ROOT_ENV = "PPOMI_OUTPUT_ROOT"


def world_seed(cfg: ExperimentConfig) -> int:
    return derive_seed(cfg.master_seed, "world") & 0x7FFFFFFF


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    if args.out:
        return Path(args.out)
    if cfg.experiment.out:
        return Path(cfg.experiment.out)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / args.command


def _load_cfg(args) -> ExperimentConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"experiment.seed={args.seed}")
    return parse_config(args.config, overrides)


def cmd_world(args, cfg):
    out = _out_dir(args, cfg)
    bundle = build_world(cfg.world, world_seed(cfg), cfg.train, cfg.evaluator)
    write_effective_config(cfg, out)
    path = save_world(bundle, out / "world.json")
    print(f"world written to {path}")
    print(f"target train accuracy    {bundle.target.train_accuracy:.4f}")
    print(f"evaluator train accuracy {bundle.evaluator.train_accuracy:.4f}")
    return 0


def _run(args, cfg, methods):
    if not args.world:
        raise ResultsIOError("--world is required", None)
    bundle = load_world(args.world)
    out = _out_dir(args, cfg)
    camp = cfg.campaign_config(methods)
    camp.validate(bundle.world.n_classes)
    mdp = cfg.mdp_config()
    if mdp.z_dim != bundle.world.z_dim:
        raise ConfigError(f"config has world.z_dim={mdp.z_dim} but {args.world} has z_dim={bundle.world.z_dim}", "world.z_dim")
    result = run_campaign(bundle, camp, mdp, cfg.ppo, jobs=args.jobs)
    write_effective_config(cfg, out)
    write_campaign(result, out, bundle)
    for o, r in zip(result.outcomes, result.records):
        gap = "" if r.optimality_gap is None else f" gap={r.optimality_gap:.3g}"
        print(
            f"{o.run_id:<28} best_score={o.best_score:.6f} queries={o.queries_used} "
            f"top1(eval)={int(r.top1_evaluator)} top5(eval)={int(r.top5_evaluator)}{gap}"
        )
    print(f"results written to {out}")
    return 0


def cmd_attack(args, cfg):
    if args.method not in METHODS:
        raise ConfigError(f"unknown method {args.method!r}; valid methods: {', '.join(METHODS)}", "method")
    return _run(args, cfg, [args.method])


def cmd_campaign(args, cfg):
    return _run(args, cfg, None)


def cmd_evaluate(args, cfg):
    run_dir = Path(args.directory)
    if not run_dir.is_dir():
        raise ResultsIOError("run directory not found", run_dir)
    bundle = load_world(args.world or run_dir / "world.json")
    outcomes = load_outcomes(run_dir)
    brute = {}
    if bundle.world.z_dim <= 3 and cfg.campaign.brute_force:
        b = cfg.mdp.latent_bound
        grid = GridSpec(-b, b, cfg.campaign.grid_points)
        brute = {y: brute_force_optimum(bundle, y, grid) for y in sorted({o.target_class for o in outcomes})}
    records = [evaluate_outcome(bundle, o, brute.get(o.target_class)) for o in outcomes]
    write_results(records, run_dir)
    write_results_csv(records, run_dir / "results.csv")
    write_summary(aggregate(records, outcomes), brute, run_dir / "summary.json")
    print(f"evaluated {len(records)} runs in {run_dir}")
    return 0


def _fmt(v, spec=".3f"):
    return "-" if v is None else format(v, spec)


def cmd_report(args, cfg):
    run_dir = Path(args.directory)
    if not run_dir.is_dir():
        raise ResultsIOError("run directory not found", run_dir)
    outcomes = load_outcomes(run_dir)
    records = read_results(run_dir)
    table = aggregate(records, outcomes)
    header = f"{'method':<14} {'class':>5} {'runs':>4} {'top1_eval':>9} {'top5_eval':>9} {'top1_tgt':>8} {'top5_tgt':>8} {'score':>10} {'gap':>10} {'queries':>8}"
    print(header)
    for r in table.rows:
        print(
            f"{r['method']:<14} {r['class']:>5} {r['n_runs']:>4} {r['top1_evaluator_mean']:>9.3f} "
            f"{r['top5_evaluator_mean']:>9.3f} {r['top1_target_mean']:>8.3f} {r['top5_target_mean']:>8.3f} "
            f"{r['best_score_mean']:>10.6f} {_fmt(r['gap_mean'], '.2e'):>10} {r['queries_mean']:>8.0f}"
        )
    paths = emit_plot_data(run_dir)
    print("plot data: " + ", ".join(str(p) for p in paths))
    print("top-5 uses k = min(5, n_classes); optimality gap is measured against a brute-force grid optimum.")
    return 0


COMMANDS = {
    "world": cmd_world,
    "attack": cmd_attack,
    "campaign": cmd_campaign,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI experiment config (defaults if omitted)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. mdp.alpha=0.5 (repeatable)")
    common.add_argument("--out", metavar="DIR", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>)")
    common.add_argument("--seed", type=int, metavar="N", help="master seed (overrides experiment.seed)")
    common.add_argument("--jobs", type=int, default=1, metavar="N", help="worker processes for campaign cells")

    p = argparse.ArgumentParser(prog="ppomi", description="Black-box model inversion with PPO on synthetic worlds.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("world", parents=[common], help="create and train a synthetic world")
    a = sub.add_parser("attack", parents=[common], help="run one method over the configured classes and seeds")
    a.add_argument("--world", metavar="FILE", required=True)
    a.add_argument("--method", default="ppo_mi", help=f"one of {', '.join(METHODS)}")
    c = sub.add_parser("campaign", parents=[common], help="run every configured method")
    c.add_argument("--world", metavar="FILE", required=True)
    e = sub.add_parser("evaluate", parents=[common], help="recompute evaluation records for a run directory")
    e.add_argument("directory")
    e.add_argument("--world", metavar="FILE", help="world file (default DIR/world.json)")
    r = sub.add_parser("report", parents=[common], help="print a summary and emit plot data")
    r.add_argument("directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.jobs < 1:
            raise ConfigError(f"--jobs must be >= 1, got {args.jobs}", "jobs")
        cfg = _load_cfg(args)
        return COMMANDS[args.command](args, cfg)
    except PpoMiError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
