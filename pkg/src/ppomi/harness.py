"""Attack campaigns: PPO-MI and query-matched derivative-free baselines.

Every (method, class, seed) cell gets a fresh budgeted oracle and a random
stream keyed by the seed *value*, so reordering or extending the seed list
never changes an existing cell.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, PpoMiError, ResultsIOError, UsageError
from .evaluation import (
    GridSpec,
    brute_force_optimum,
    emit_plot_data,
    evaluate_outcome,
    write_results,
    MAX_BRUTE_FORCE_DIM,
)
from .mdp import MdpConfig, clip_latent
from .numkit import Rng, derive_seed
from .ppo import AttackOutcome, PpoConfig, current_score, run_attack
from .worldgen import Oracle, WorldBundle, save_world

METHODS = ("ppo_mi", "random_search", "hillclimb")
RESULT_COLUMNS = ["method", "class", "seed", "best_score", "top1", "top5", "queries"]


# ---------------------------------------------------------------------------
# baselines


def _baseline_outcome(method, bundle, y, seed, budget):
    return AttackOutcome(
        method, y, seed, np.zeros(bundle.world.z_dim), 0.0, query_budget=budget, world_seed=bundle.world.creation_seed
    )


def run_random_search(bundle: WorldBundle, y: int, budget: int, rng: Rng, *, seed: int = 0, latent_bound: float = 3.0):
    """Score ``budget`` independent N(0, I) latents and keep the best.

    One draw per query from a single stream, so a larger budget only extends
    the prefix of candidates seen by a smaller one.
    """
    if budget < 1:
        raise ConfigError(f"budget must be >= 1, got {budget}", "campaign.query_budget")
    t0 = time.perf_counter()
    oracle = Oracle(bundle.require_trained().target, budget)
    gen = bundle.world.generator
    out = _baseline_outcome("random_search", bundle, y, seed, budget)
    for i in range(budget):
        z = clip_latent(rng.normal(bundle.world.z_dim), latent_bound)
        score = current_score(oracle, gen, z, y)
        if score > out.best_score:
            out.best_score, out.best_latent, out.found = score, z, True
        out.score_trace.append(out.best_score)
        out.query_trace.append(i + 1)
    out.episodes_run = out.queries_used = budget
    out.oracle_query_count = oracle.query_count
    out.wall_clock_seconds = time.perf_counter() - t0
    return out


def run_hillclimb(
    bundle: WorldBundle, y: int, budget: int, step_sigma: float, rng: Rng, *, seed: int = 0, latent_bound: float = 3.0
):
    """Greedy Gaussian-perturbation hill climbing on the target-class score.

    A proposal replaces the incumbent only if its score is strictly higher.
    """
    if budget < 1:
        raise ConfigError(f"budget must be >= 1, got {budget}", "campaign.query_budget")
    if not step_sigma > 0:
        raise ConfigError(f"step_sigma must be > 0, got {step_sigma}", "campaign.step_sigma")
    t0 = time.perf_counter()
    oracle = Oracle(bundle.require_trained().target, budget)
    gen = bundle.world.generator
    out = _baseline_outcome("hillclimb", bundle, y, seed, budget)
    z = clip_latent(rng.normal(bundle.world.z_dim), latent_bound)
    score = current_score(oracle, gen, z, y)
    out.best_score, out.best_latent, out.found = score, z, True
    accepted = [score]
    out.score_trace.append(score)
    out.query_trace.append(1)
    for i in range(1, budget):
        proposal = clip_latent(z + step_sigma * rng.normal(z.shape), latent_bound)
        s = current_score(oracle, gen, proposal, y)
        if s > score:
            z, score = proposal, s
            accepted.append(s)
        out.score_trace.append(score)
        out.query_trace.append(i + 1)
    out.best_score, out.best_latent = score, z
    out.extras["accepted_scores"] = accepted
    out.episodes_run = out.queries_used = budget
    out.oracle_query_count = oracle.query_count
    out.wall_clock_seconds = time.perf_counter() - t0
    return out


# ---------------------------------------------------------------------------
# campaigns


@dataclass(frozen=True)
class CampaignConfig:
    methods: tuple = ("ppo_mi", "random_search", "hillclimb")
    target_classes: tuple = (0, 1, 2, 3)
    seeds: tuple = (0, 1, 2)
    query_budget: int = 2000
    step_sigma: float = 0.3
    master_seed: int = 0
    brute_force: bool = True
    grid_points: int = 201

    def validate(self, n_classes=None):
        if not self.methods:
            raise ConfigError("at least one method is required", "campaign.methods")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; valid methods: {', '.join(METHODS)}", "campaign.methods")
        if not self.target_classes:
            raise ConfigError("at least one target class is required", "mdp.target_classes")
        for y in self.target_classes:
            if y < 0 or (n_classes is not None and y >= n_classes):
                raise ConfigError(f"target class {y} outside [0, {n_classes})", "mdp.target_classes")
        if not self.seeds:
            raise ConfigError("at least one seed is required", "campaign.seeds")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct", "campaign.seeds")
        if self.query_budget <= 0:
            raise ConfigError(f"query_budget must be > 0, got {self.query_budget}", "campaign.query_budget")
        if not self.step_sigma > 0:
            raise ConfigError(f"step_sigma must be > 0, got {self.step_sigma}", "campaign.step_sigma")
        if self.grid_points < 2:
            raise ConfigError("grid_points must be >= 2", "campaign.grid_points")
        return self


def cell_rng(master_seed: int, method: str, y: int, seed: int) -> Rng:
    return Rng(derive_seed(master_seed, method, y, seed))


def run_cell(bundle: WorldBundle, method: str, y: int, seed: int, cfg: CampaignConfig, mdp_cfg: MdpConfig, ppo_cfg: PpoConfig):
    rng = cell_rng(cfg.master_seed, method, y, seed)
    if method == "ppo_mi":
        mcfg = MdpConfig(**{**asdict(mdp_cfg), "target_class": y})
        return run_attack(bundle, mcfg, ppo_cfg, seed, cfg.query_budget, rng=rng)
    if method == "random_search":
        return run_random_search(bundle, y, cfg.query_budget, rng, seed=seed, latent_bound=mdp_cfg.latent_bound)
    if method == "hillclimb":
        return run_hillclimb(bundle, y, cfg.query_budget, cfg.step_sigma, rng, seed=seed, latent_bound=mdp_cfg.latent_bound)
    raise ConfigError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}", "campaign.methods")


def _run_cell_job(args):
    bundle, method, y, seed, cfg, mdp_cfg, ppo_cfg = args
    try:
        return run_cell(bundle, method, y, seed, cfg, mdp_cfg, ppo_cfg)
    except PpoMiError as exc:
        raise UsageError(f"cell (method={method}, class={y}, seed={seed}) failed: {exc}") from exc


@dataclass
class ComparisonTable:
    rows: list = field(default_factory=list)

    def row(self, method, y):
        for r in self.rows:
            if r["method"] == method and r["class"] == y:
                return r
        raise KeyError((method, y))


@dataclass
class CampaignResult:
    table: ComparisonTable
    outcomes: list
    records: list
    brute: dict


def _mean_std(values):
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


def aggregate(records, outcomes) -> ComparisonTable:
    """Per (method, class) means and population stds over seeds."""
    table = ComparisonTable()
    keys = sorted({(r.method, r.target_class) for r in records}, key=lambda k: (METHODS.index(k[0]) if k[0] in METHODS else 99, k))
    by_run = {o.run_id: o for o in outcomes}
    for method, y in keys:
        cell = [r for r in records if r.method == method and r.target_class == y]
        score_mean, score_std = _mean_std([r.best_score for r in cell])
        row = {
            "method": method,
            "class": y,
            "seeds": sorted(r.seed for r in cell),
            "n_runs": len(cell),
            "best_score_mean": score_mean,
            "best_score_std": score_std,
        }
        for k in (1, 5):
            for role in ("evaluator", "target"):
                m, s = _mean_std([float(r.top(k, role)) for r in cell])
                row[f"top{k}_{role}_mean"] = m
                row[f"top{k}_{role}_std"] = s
        gaps = [r.optimality_gap for r in cell if r.optimality_gap is not None]
        row["gap_mean"], row["gap_std"] = _mean_std(gaps) if len(gaps) == len(cell) else (None, None)
        queries = [by_run[r.run_id].queries_used for r in cell]
        row["queries_mean"], row["queries_std"] = _mean_std(queries)
        row["queries_max"] = int(max(queries))
        table.rows.append(row)
    return table


def run_campaign(bundle: WorldBundle, cfg: CampaignConfig, mdp_cfg: MdpConfig, ppo_cfg: PpoConfig, jobs: int = 1) -> CampaignResult:
    """Run every (method, class, seed) cell, evaluate and aggregate."""
    bundle.require_trained()
    world = bundle.world
    cfg.validate(world.n_classes)
    mdp_cfg.validate()
    ppo_cfg.validate()
    if mdp_cfg.z_dim != world.z_dim:
        raise ConfigError(f"mdp.z_dim={mdp_cfg.z_dim} but the world has z_dim={world.z_dim}", "mdp.z_dim")
    if jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {jobs}", "jobs")
    cells = [(m, y, s) for m in cfg.methods for y in cfg.target_classes for s in cfg.seeds]
    jobs_args = [(bundle, m, y, s, cfg, mdp_cfg, ppo_cfg) for m, y, s in cells]
    if jobs == 1:
        outcomes = [_run_cell_job(a) for a in jobs_args]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_cell_job, jobs_args))
    for o in outcomes:
        if o.queries_used != o.oracle_query_count or o.queries_used > cfg.query_budget:
            raise UsageError(
                f"query accounting mismatch in {o.run_id}: harness {o.queries_used}, oracle {o.oracle_query_count}, "
                f"budget {cfg.query_budget}"
            )
    brute = {}
    if cfg.brute_force and world.z_dim <= MAX_BRUTE_FORCE_DIM:
        grid = GridSpec(-mdp_cfg.latent_bound, mdp_cfg.latent_bound, cfg.grid_points)
        brute = {y: brute_force_optimum(bundle, y, grid) for y in cfg.target_classes}
    records = [evaluate_outcome(bundle, o, brute.get(o.target_class)) for o in outcomes]
    return CampaignResult(aggregate(records, outcomes), outcomes, records, brute)


# ---------------------------------------------------------------------------
# persistence


def outcome_to_json(o: AttackOutcome) -> dict:
    return {
        "run_id": o.run_id,
        "method": o.method,
        "target_class": o.target_class,
        "seed": o.seed,
        "world_seed": o.world_seed,
        "best_latent": [float(v) for v in o.best_latent],
        "best_score": float(o.best_score),
        "found": bool(o.found),
        "episodes_run": o.episodes_run,
        "queries_used": o.queries_used,
        "oracle_query_count": o.oracle_query_count,
        "query_budget": o.query_budget,
        "score_trace": [float(v) for v in o.score_trace],
        "query_trace": [int(v) for v in o.query_trace],
        "update_stats": [asdict(s) for s in o.update_stats],
        "extras": o.extras,
        "wall_clock_seconds": o.wall_clock_seconds,
    }


def outcome_from_json(d: dict) -> AttackOutcome:
    o = AttackOutcome(
        d["method"],
        int(d["target_class"]),
        int(d["seed"]),
        np.asarray(d["best_latent"], dtype=np.float64),
        float(d["best_score"]),
        score_trace=list(d["score_trace"]),
        query_trace=list(d["query_trace"]),
        episodes_run=int(d["episodes_run"]),
        queries_used=int(d["queries_used"]),
        query_budget=d["query_budget"],
        oracle_query_count=int(d["oracle_query_count"]),
        found=bool(d["found"]),
        wall_clock_seconds=float(d["wall_clock_seconds"]),
        world_seed=d.get("world_seed"),
        extras=d.get("extras", {}),
    )
    return o


def load_outcomes(run_dir) -> list:
    files = sorted((Path(run_dir) / "runs").glob("*.json"))
    if not files:
        raise ResultsIOError("no outcome files (runs/*.json)", run_dir)
    out = []
    for f in files:
        try:
            out.append(outcome_from_json(json.loads(f.read_text())))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ResultsIOError(f"corrupted outcome file: {exc}", f) from exc
    # same order as run_campaign produces them
    out.sort(key=lambda o: (METHODS.index(o.method) if o.method in METHODS else len(METHODS), o.method, o.target_class, o.seed))
    return out


def write_results_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS + ["top1_target", "top5_target", "optimality_gap"])
        for r in sorted(records, key=lambda r: (r.method, r.target_class, r.seed)):
            gap = "" if r.optimality_gap is None else repr(r.optimality_gap)
            w.writerow(
                [r.method, r.target_class, r.seed, repr(r.best_score), int(r.top1_evaluator), int(r.top5_evaluator),
                 r.queries_used, int(r.top1_target), int(r.top5_target), gap]
            )


def write_trace_csv(o: AttackOutcome, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "best_score", "cumulative_queries"])
        for i, (b, q) in enumerate(zip(o.score_trace, o.query_trace)):
            w.writerow([i + 1, repr(float(b)), int(q)])


def write_campaign(result: CampaignResult, directory, bundle: WorldBundle | None = None) -> Path:
    """Persist outcomes, evaluation records, the comparison table and plot data."""
    directory = Path(directory)
    try:
        (directory / "runs").mkdir(parents=True, exist_ok=True)
        for o in result.outcomes:
            (directory / "runs" / f"{o.run_id}.json").write_text(json.dumps(outcome_to_json(o), indent=1, sort_keys=True) + "\n")
            write_trace_csv(o, directory / "runs" / f"{o.run_id}.trace.csv")
        if bundle is not None:
            save_world(bundle, directory / "world.json")
        write_results(result.records, directory)
        write_results_csv(result.records, directory / "results.csv")
        write_summary(result.table, result.brute, directory / "summary.json")
        emit_plot_data(directory)
    except OSError as exc:
        raise ResultsIOError(f"cannot write campaign results: {exc}", exc.filename or directory) from exc
    return directory


def write_summary(table: ComparisonTable, brute: dict, path):
    doc = {
        "schema": "ppomi.summary",
        "schema_version": 1,
        "std": "population (ddof=0) over seeds",
        "top5_note": "top-5 uses k = min(5, n_classes)",
        "brute_force": {str(y): {"p_opt": b.p_opt, "z_opt": [float(v) for v in b.z_opt]} for y, b in sorted(brute.items())},
        "rows": table.rows,
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")

