"""Ground truth and metrics.

Everything here evaluates classifiers directly (white-box) and never
touches an ``Oracle``: the brute-force optimum is the experimenter's
reference, not something an attack could call.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import CapabilityError, ConfigError, ResultsIOError, UsageError
from .worldgen import GeneratorSpec, TargetModel, WorldBundle, generate, predict_proba

RESULTS_SCHEMA_VERSION = 1
MAX_GRID_POINTS = 10**7
MAX_BRUTE_FORCE_DIM = 3
PLOT_COLUMNS = ["method", "seed", "episode", "best_score", "cumulative_queries"]


@dataclass(frozen=True)
class GridSpec:
    lo: float = -3.0
    hi: float = 3.0
    points: int = 201

    def validate(self, z_dim):
        if not self.lo < self.hi:
            raise ConfigError(f"grid bounds need lo < hi, got [{self.lo}, {self.hi}]", "grid")
        if self.points < 2:
            raise ConfigError("grid needs at least 2 points per dimension", "grid.points")
        if self.points**z_dim > MAX_GRID_POINTS:
            raise CapabilityError(f"grid of {self.points}^{z_dim} points exceeds the {MAX_GRID_POINTS} guard")

    def axis(self):
        return np.linspace(self.lo, self.hi, self.points)


@dataclass(frozen=True)
class BruteForceResult:
    z_opt: np.ndarray
    p_opt: float
    target_class: int
    world_seed: int


def brute_force_optimum(bundle: WorldBundle, y: int, grid: GridSpec = GridSpec(), chunk: int = 200_000) -> BruteForceResult:
    """Exhaustive argmax of P(y | T(G(z))) over a regular latent grid.

    Grid points are enumerated in lexicographic order and ``np.argmax``
    keeps the first maximum, so ties resolve to the lexicographically
    smallest point.
    """
    world = bundle.world
    if bundle.target is None:
        raise UsageError("brute force needs a trained target")
    if world.z_dim > MAX_BRUTE_FORCE_DIM:
        raise CapabilityError(f"brute force is limited to z_dim <= {MAX_BRUTE_FORCE_DIM}, world has {world.z_dim}")
    if not 0 <= y < world.n_classes:
        raise UsageError(f"class {y} outside [0, {world.n_classes})")
    grid.validate(world.z_dim)
    axis = grid.axis()
    total = grid.points**world.z_dim
    best_p, best_i = -math.inf, -1
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        digits = np.stack(np.unravel_index(idx, (grid.points,) * world.z_dim), axis=1)
        p = predict_proba(bundle.target, generate(world.generator, axis[digits]))[:, y]
        i = int(np.argmax(p))
        if p[i] > best_p:
            best_p, best_i = float(p[i]), int(idx[i])
    digits = np.array(np.unravel_index(best_i, (grid.points,) * world.z_dim))
    return BruteForceResult(axis[digits], best_p, y, world.creation_seed)


def top_k_success(classifier: TargetModel, generator: GeneratorSpec, z, y: int, k: int) -> bool:
    """Is ``y`` among the ``k`` most probable classes of ``classifier(G(z))``?

    Ranks are taken from a stable sort on descending probability, so equal
    probabilities rank the lower class index first.
    """
    n = classifier.n_classes
    if not 1 <= k <= n:
        raise UsageError(f"k={k} outside [1, {n}]")
    probs = predict_proba(classifier, generate(generator, z))
    order = np.argsort(-probs, kind="stable")
    return bool(y in order[:k])


def effective_k(k: int, n_classes: int) -> int:
    """Top-k with k capped at the number of classes (top-5 of a 4-class world is top-4)."""
    return min(k, n_classes)


@dataclass
class EvalRecord:
    run_id: str
    method: str
    target_class: int
    seed: int
    best_latent: list
    best_score: float
    score_target: float
    label_target: int
    label_evaluator: int
    top1_target: bool
    top5_target: bool
    top1_evaluator: bool
    top5_evaluator: bool
    queries_used: int
    p_opt: float | None = None
    optimality_gap: float | None = None

    def top(self, k, evaluator="evaluator"):
        if k not in (1, 5) or evaluator not in ("target", "evaluator"):
            raise UsageError(f"no stored flag for top-{k} / {evaluator}")
        return getattr(self, f"top{k}_{evaluator}")


def evaluate_outcome(bundle: WorldBundle, outcome, brute: BruteForceResult | None = None) -> EvalRecord:
    """Score one attack outcome against both classifiers."""
    bundle.require_trained()
    world = bundle.world
    y = outcome.target_class
    z = np.asarray(outcome.best_latent, dtype=np.float64)
    gen = world.generator
    found = getattr(outcome, "found", True)
    p_t = predict_proba(bundle.target, generate(gen, z))
    p_e = predict_proba(bundle.evaluator, generate(gen, z))
    flags = {
        f"top{k}_{role}": bool(found and top_k_success(model, gen, z, y, effective_k(k, world.n_classes)))
        for k in (1, 5)
        for role, model in (("target", bundle.target), ("evaluator", bundle.evaluator))
    }
    rec = EvalRecord(
        run_id=outcome.run_id,
        method=outcome.method,
        target_class=y,
        seed=outcome.seed,
        best_latent=[float(v) for v in z],
        best_score=float(outcome.best_score),
        score_target=float(p_t[y]),
        label_target=int(np.argmax(p_t)),
        label_evaluator=int(np.argmax(p_e)),
        queries_used=int(outcome.queries_used),
        **flags,
    )
    if brute is not None:
        rec.p_opt = brute.p_opt
        rec.optimality_gap = optimality_gap(outcome, brute)
    return rec


def success_rate(records, evaluator: str = "evaluator", k: int = 1) -> float:
    records = list(records)
    if not records:
        raise UsageError("success_rate of no runs")
    return sum(bool(r.top(k, evaluator)) for r in records) / len(records)


def optimality_gap(outcome, brute: BruteForceResult) -> float:
    """``p_opt - best_score`` for the same world and class."""
    if outcome.target_class != brute.target_class:
        raise UsageError(f"outcome is for class {outcome.target_class}, brute force for class {brute.target_class}")
    world_seed = getattr(outcome, "world_seed", None)
    if world_seed is not None and world_seed != brute.world_seed:
        raise UsageError(f"outcome is from world {world_seed}, brute force from world {brute.world_seed}")
    return brute.p_opt - float(outcome.best_score)


# ---------------------------------------------------------------------------
# files

RECORD_FIELDS = list(EvalRecord.__dataclass_fields__)
CSV_FIELDS = [f for f in RECORD_FIELDS if f != "best_latent"]


def write_results(records, directory) -> dict:
    """Write ``records.jsonl`` and ``records.csv`` into ``directory``.

    Floats are written with ``repr``, which round-trips float64 exactly.
    """
    directory = Path(directory)
    paths = {"jsonl": directory / "records.jsonl", "csv": directory / "records.csv"}
    try:
        directory.mkdir(parents=True, exist_ok=True)
        with paths["jsonl"].open("w") as fh:
            fh.write(json.dumps({"schema": "ppomi.eval_records", "schema_version": RESULTS_SCHEMA_VERSION}) + "\n")
            for r in records:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
        with paths["csv"].open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_FIELDS)
            for r in records:
                w.writerow([_csv_value(getattr(r, f)) for f in CSV_FIELDS])
    except OSError as exc:
        raise ResultsIOError(f"cannot write results: {exc}", exc.filename or directory) from exc
    return paths


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def read_results(directory) -> list:
    path = Path(directory) / "records.jsonl"
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ResultsIOError(f"cannot read records: {exc}", path) from exc
    try:
        header = json.loads(lines[0])
        if header.get("schema_version") != RESULTS_SCHEMA_VERSION:
            raise ValueError(f"unsupported schema version {header.get('schema_version')!r}")
        return [EvalRecord(**json.loads(line)) for line in lines[1:] if line.strip()]
    except (IndexError, ValueError, TypeError) as exc:
        raise ResultsIOError(f"corrupted records file: {exc}", path) from exc


def load_traces(run_dir) -> list:
    """Read every ``runs/*.json`` outcome file in a run directory."""
    run_dir = Path(run_dir)
    files = sorted((run_dir / "runs").glob("*.json"))
    if not files:
        raise ResultsIOError("no score traces (runs/*.json) found", run_dir)
    out = []
    for f in files:
        try:
            d = json.loads(f.read_text())
            out.append(
                {
                    "method": d["method"],
                    "target_class": int(d["target_class"]),
                    "seed": int(d["seed"]),
                    "score_trace": [float(v) for v in d["score_trace"]],
                    "query_trace": [int(v) for v in d["query_trace"]],
                }
            )
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ResultsIOError(f"corrupted outcome file: {exc}", f) from exc
    return out


def emit_plot_data(run_dir, out_path=None) -> list:
    """Write tidy score-trace CSVs for plotting.

    Columns are exactly ``method, seed, episode, best_score,
    cumulative_queries``.  Runs for a single target class go to
    ``plot_data.csv``; with several classes one file per class is written
    (``plot_data_class<y>.csv``) so every (method, seed) group is one trace.
    """
    run_dir = Path(run_dir)
    traces = load_traces(run_dir)
    classes = sorted({t["target_class"] for t in traces})
    paths = []
    for y in classes:
        if out_path is not None and len(classes) == 1:
            path = Path(out_path)
        else:
            name = "plot_data.csv" if len(classes) == 1 else f"plot_data_class{y}.csv"
            path = run_dir / name
        rows = [
            (t["method"], t["seed"], i + 1, repr(s), q)
            for t in sorted(traces, key=lambda t: (t["method"], t["seed"]))
            if t["target_class"] == y
            for i, (s, q) in enumerate(zip(t["score_trace"], t["query_trace"]))
        ]
        try:
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(PLOT_COLUMNS)
                w.writerows(rows)
        except OSError as exc:
            raise ResultsIOError(f"cannot write plot data: {exc}", path) from exc
        paths.append(path)
    return paths


def merge_plot_data(paths, out_path) -> Path:
    """Concatenate several plot-data CSVs (rows are additive)."""
    rows = []
    for p in paths:
        with open(p, newline="") as fh:
            r = csv.reader(fh)
            if next(r) != PLOT_COLUMNS:
                raise ResultsIOError("unexpected plot-data header", p)
            rows.extend(r)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PLOT_COLUMNS)
        w.writerows(rows)
    return Path(out_path)


def iter_grid(grid: GridSpec, z_dim: int):
    """Lexicographic iterator over grid points (used by tests as a slow reference)."""
    return (np.array(p) for p in itertools.product(grid.axis(), repeat=z_dim))
