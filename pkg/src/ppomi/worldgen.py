"""Synthetic attack worlds.

A world is a Gaussian mixture in data space whose class centroids are the
images of latent anchors under a known generator.  On top of it we train a
target classifier (the model under attack) and an independent evaluator,
and expose the target only through a budget-enforcing ``Oracle``.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BudgetError, ConfigError, ResultsIOError, ShapeError, TrainingError, UsageError
from .numkit import MlpParams, Rng, adam_init, adam_step, argmax_lowest, init_mlp, mlp_backward, mlp_forward, softmax

WORLD_SCHEMA_VERSION = 1
GENERATOR_KINDS = ("identity", "linear", "mlp")


@dataclass(frozen=True)
class WorldConfig:
    z_dim: int = 2
    data_dim: int = 2
    n_classes: int = 4
    class_spread: float = 0.3
    generator: str = "identity"
    # latent anchors (class preimages) are drawn uniformly from [-r, r]^z_dim
    anchor_radius: float = 2.0
    generator_hidden: int = 16

    def validate(self, allow_single_class=False):
        lo = 1 if allow_single_class else 2
        if self.n_classes < lo:
            raise ConfigError(f"n_classes must be >= {lo}, got {self.n_classes}", "world.n_classes")
        if self.z_dim < 1:
            raise ConfigError(f"z_dim must be >= 1, got {self.z_dim}", "world.z_dim")
        if self.data_dim < 1:
            raise ConfigError(f"data_dim must be >= 1, got {self.data_dim}", "world.data_dim")
        if not self.class_spread > 0:
            raise ConfigError(f"class_spread must be > 0, got {self.class_spread}", "world.class_spread")
        if self.generator not in GENERATOR_KINDS:
            raise ConfigError(
                f"unknown generator kind {self.generator!r}; expected one of {', '.join(GENERATOR_KINDS)}",
                "world.generator",
            )
        if self.generator == "identity" and self.z_dim != self.data_dim:
            raise ConfigError(
                f"identity generator needs z_dim == data_dim (got {self.z_dim} and {self.data_dim})",
                "world.generator",
            )
        if not self.anchor_radius > 0:
            raise ConfigError("anchor_radius must be > 0", "world.anchor_radius")
        if self.generator_hidden < 1:
            raise ConfigError("generator_hidden must be >= 1", "world.generator_hidden")


@dataclass(frozen=True)
class TrainConfig:
    n_per_class: int = 200
    hidden: int = 32
    epochs: int = 60
    batch_size: int = 64
    lr: float = 0.01
    min_accuracy: float = 0.95

    def validate(self, section="train"):
        if self.n_per_class < 1:
            raise ConfigError("n_per_class must be >= 1", f"{section}.n_per_class")
        if self.hidden < 1:
            raise ConfigError("hidden must be >= 1", f"{section}.hidden")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0", f"{section}.epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", f"{section}.batch_size")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0", f"{section}.lr")
        if not 0.0 <= self.min_accuracy <= 1.0:
            raise ConfigError("min_accuracy must lie in [0, 1]", f"{section}.min_accuracy")


DEFAULT_EVALUATOR_CONFIG = TrainConfig(hidden=16)


@dataclass(frozen=True, eq=False)
class GeneratorSpec:
    kind: str
    z_dim: int
    data_dim: int
    matrix: np.ndarray | None = None
    bias: np.ndarray | None = None
    mlp: MlpParams | None = None

    def __eq__(self, other):
        if not isinstance(other, GeneratorSpec):
            return NotImplemented
        return (self.kind, self.z_dim, self.data_dim) == (other.kind, other.z_dim, other.data_dim) and all(
            _arrays_equal(a, b) for a, b in zip(_gen_arrays(self), _gen_arrays(other))
        )


def _gen_arrays(g):
    if g.kind == "linear":
        return [g.matrix, g.bias]
    if g.kind == "mlp":
        return g.mlp.arrays()
    return []


def _arrays_equal(a, b):
    return a.shape == b.shape and np.array_equal(a, b)


def generate(g: GeneratorSpec, z):
    """Map a latent vector (or a batch of them) to data space."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1:] != (g.z_dim,):
        raise ShapeError(f"latent of shape {z.shape} given to a generator with z_dim={g.z_dim}")
    if g.kind == "identity":
        return z.copy()
    if g.kind == "linear":
        return z @ g.matrix.T + g.bias
    return mlp_forward(g.mlp, z)[0]


def make_generator(cfg: WorldConfig, rng: Rng) -> GeneratorSpec:
    if cfg.generator == "identity":
        return GeneratorSpec("identity", cfg.z_dim, cfg.data_dim)
    if cfg.generator == "linear":
        m = rng.normal((cfg.data_dim, cfg.z_dim)) / math.sqrt(cfg.z_dim)
        return GeneratorSpec("linear", cfg.z_dim, cfg.data_dim, matrix=m, bias=np.zeros(cfg.data_dim))
    # Scale 2 keeps the tanh units out of their linear regime so G is visibly nonlinear.
    mlp = init_mlp([cfg.z_dim, cfg.generator_hidden, cfg.data_dim], rng, scale=2.0)
    return GeneratorSpec("mlp", cfg.z_dim, cfg.data_dim, mlp=mlp)


@dataclass(frozen=True, eq=False)
class World:
    config: WorldConfig
    anchors: np.ndarray  # (n_classes, z_dim) latent preimages of the centroids
    centroids: np.ndarray  # (n_classes, data_dim)
    generator: GeneratorSpec
    creation_seed: int

    @property
    def z_dim(self):
        return self.config.z_dim

    @property
    def data_dim(self):
        return self.config.data_dim

    @property
    def n_classes(self):
        return self.config.n_classes

    @property
    def class_spread(self):
        return self.config.class_spread

    def __eq__(self, other):
        if not isinstance(other, World):
            return NotImplemented
        return (
            self.config == other.config
            and self.creation_seed == other.creation_seed
            and _arrays_equal(self.anchors, other.anchors)
            and _arrays_equal(self.centroids, other.centroids)
            and self.generator == other.generator
        )


def _min_pairwise_distance(points):
    if len(points) < 2:
        return math.inf
    diff = points[:, None, :] - points[None, :, :]
    d = np.sqrt((diff**2).sum(-1))
    return float(d[np.triu_indices(len(points), 1)].min())


def make_world(cfg: WorldConfig, seed: int, *, allow_single_class=False, max_tries=200) -> World:
    """Build a world deterministically from ``(cfg, seed)``.

    Latent anchors are rejection-sampled until their images are at least
    ``4 * class_spread`` apart.  If that never happens the anchors (and,
    for identity/linear generators, the centroids) are rescaled instead, so
    the separation post-condition always holds.
    """
    cfg.validate(allow_single_class)
    rng = Rng(seed, "world")
    generator = make_generator(cfg, rng.split("generator"))
    anchor_rng = rng.split("anchors")
    need = 4.0 * cfg.class_spread
    r = cfg.anchor_radius
    best = None
    for _ in range(max_tries):
        anchors = anchor_rng.uniform(-r, r, size=(cfg.n_classes, cfg.z_dim))
        centroids = generate(generator, anchors)
        d = _min_pairwise_distance(centroids)
        if best is None or d > best[0]:
            best = (d, anchors, centroids)
        if d >= need:
            break
    d, anchors, centroids = best
    if d < need:
        if cfg.generator == "mlp":
            # A nonlinear G cannot be rescaled; move the centroids off-manifold as a last resort.
            centroids = centroids * (need / d)
        else:
            anchors = anchors * (need / d)
            centroids = generate(generator, anchors)
            if _min_pairwise_distance(centroids) < need:
                centroids = centroids * (need / _min_pairwise_distance(centroids))
    return World(cfg, anchors, centroids, generator, int(seed))


def sample_labeled_data(world: World, n_per_class: int, rng: Rng):
    """``n_per_class`` Gaussian points per class; returns ``(x, labels)``."""
    if n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1", "n_per_class")
    k, d = world.centroids.shape
    labels = np.repeat(np.arange(k), n_per_class)
    x = world.centroids[labels] + world.class_spread * rng.normal((k * n_per_class, d))
    return x, labels


@dataclass(frozen=True, eq=False)
class TargetModel:
    classifier: MlpParams
    train_accuracy: float
    training_seed: int
    role: str = "target"

    @property
    def n_classes(self):
        return self.classifier.out_dim

    def __eq__(self, other):
        if not isinstance(other, TargetModel):
            return NotImplemented
        return (
            self.train_accuracy == other.train_accuracy
            and self.training_seed == other.training_seed
            and self.role == other.role
            and all(_arrays_equal(a, b) for a, b in zip(self.classifier.arrays(), other.classifier.arrays()))
        )


def predict_proba(model: TargetModel, x):
    """White-box class probabilities.  Experimenter-side only; attacks use ``Oracle``."""
    return softmax(mlp_forward(model.classifier, x)[0])


def _accuracy(params, x, labels):
    logits = mlp_forward(params, x)[0]
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _train_classifier(world, tcfg: TrainConfig, rng: Rng, role: str) -> TargetModel:
    tcfg.validate(role)
    x, labels = sample_labeled_data(world, tcfg.n_per_class, rng.split("data"))
    # Standardizing inputs inside the first layer keeps training well conditioned for any centroid scale.
    mu = x.mean(axis=0)
    sd = x.std(axis=0) + 1e-12
    params = init_mlp([world.data_dim, tcfg.hidden, world.n_classes], rng.split("init"))
    w0 = params.weights[0] / sd
    params = MlpParams([w0] + params.weights[1:], [params.biases[0] - w0 @ mu] + params.biases[1:])
    adam = adam_init(params, lr=tcfg.lr)
    order_rng = rng.split("order")
    n = len(labels)
    onehot = np.eye(world.n_classes)[labels]
    for _ in range(tcfg.epochs):
        perm = order_rng.permutation(n)
        for start in range(0, n, tcfg.batch_size):
            idx = perm[start : start + tcfg.batch_size]
            logits, cache = mlp_forward(params, x[idx])
            grad_logits = (softmax(logits) - onehot[idx]) / len(idx)
            grads, _ = mlp_backward(params, cache, grad_logits)
            params, adam = adam_step(adam, params, grads)
    acc = _accuracy(params, x, labels)
    if acc < tcfg.min_accuracy:
        raise TrainingError(
            f"{role} reached train accuracy {acc:.4f} < {tcfg.min_accuracy} after {tcfg.epochs} epochs "
            f"(n_classes={world.n_classes}, data_dim={world.data_dim}, spread={world.class_spread}, "
            f"generator={world.config.generator}, world seed={world.creation_seed})"
        )
    return TargetModel(params, acc, rng.key, role)


def train_target(world: World, tcfg: TrainConfig, rng: Rng) -> TargetModel:
    """Train the attacked classifier by minibatch cross-entropy with Adam."""
    return _train_classifier(world, tcfg, rng.split("target"), "target")


def train_evaluator(world: World, tcfg: TrainConfig, rng: Rng) -> TargetModel:
    """Train the independent evaluator.

    Uses its own random stream; callers are expected to give it a different
    hidden width than the target (``DEFAULT_EVALUATOR_CONFIG``).
    """
    return _train_classifier(world, tcfg, rng.split("evaluator"), "evaluator")


# ---------------------------------------------------------------------------
# black-box oracle


@dataclass(frozen=True)
class OracleResponse:
    label: int
    probs: np.ndarray


class Oracle:
    """Query-only access to a classifier: ``(label, probs)`` per data point.

    ``query_budget=None`` means unlimited.  The budget check and the counter
    increment happen under one lock, so concurrent callers cannot overspend.
    """

    def __init__(self, model: TargetModel, query_budget: int | None = None):
        if query_budget is not None and query_budget < 1:
            raise ConfigError(f"query budget must be positive, got {query_budget}", "query_budget")
        self.__model = model
        self._budget = query_budget
        self._count = 0
        self._lock = threading.Lock()

    @property
    def query_count(self) -> int:
        return self._count

    @property
    def query_budget(self):
        return self._budget

    @property
    def remaining(self) -> float:
        return math.inf if self._budget is None else self._budget - self._count

    @property
    def n_classes(self) -> int:
        return self.__model.n_classes

    def query(self, x) -> OracleResponse:
        with self._lock:
            if self._budget is not None and self._count >= self._budget:
                raise BudgetError(self._count, self._budget)
            self._count += 1
        probs = predict_proba(self.__model, np.asarray(x, dtype=np.float64))
        if probs.ndim != 1:
            raise ShapeError("the oracle answers one data point per query")
        return OracleResponse(argmax_lowest(probs), probs)

    def __repr__(self):
        return f"Oracle(queries={self._count}, budget={self._budget})"


def oracle_query(o: Oracle, x) -> OracleResponse:
    return o.query(x)


# ---------------------------------------------------------------------------
# persistence


@dataclass(frozen=True, eq=False)
class WorldBundle:
    """A world together with its trained classifiers, as stored on disk."""

    world: World
    target: TargetModel | None = None
    evaluator: TargetModel | None = None
    train_config: TrainConfig = field(default_factory=TrainConfig)
    evaluator_config: TrainConfig = DEFAULT_EVALUATOR_CONFIG

    def require_trained(self):
        if self.target is None or self.evaluator is None:
            raise UsageError("world has no trained target/evaluator; run the `world` step first")
        return self


def build_world(
    cfg: WorldConfig,
    seed: int,
    train_cfg: TrainConfig = TrainConfig(),
    evaluator_cfg: TrainConfig = DEFAULT_EVALUATOR_CONFIG,
    *,
    allow_single_class: bool = False,
) -> WorldBundle:
    """``make_world`` plus target and evaluator training, as one bundle.

    ``allow_single_class`` admits degenerate 1-class worlds (test use only).
    """
    world = make_world(cfg, seed, allow_single_class=allow_single_class)
    rng = Rng(seed, "training")
    target = train_target(world, train_cfg, rng)
    evaluator = train_evaluator(world, evaluator_cfg, rng)
    return WorldBundle(world, target, evaluator, train_cfg, evaluator_cfg)


def _hex_array(a):
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [float(v).hex() for v in a.ravel()]}


def _unhex_array(d):
    return np.array([float.fromhex(v) for v in d["data"]], dtype=np.float64).reshape(d["shape"])


def _mlp_to_json(p: MlpParams):
    return {"activation": p.activation, "arrays": [_hex_array(a) for a in p.arrays()]}


def _mlp_from_json(d):
    arrays = [_unhex_array(a) for a in d["arrays"]]
    return MlpParams(arrays[0::2], arrays[1::2], d["activation"])


def _model_to_json(m: TargetModel | None):
    if m is None:
        return None
    return {
        "role": m.role,
        "train_accuracy": float(m.train_accuracy).hex(),
        "training_seed": m.training_seed,
        "classifier": _mlp_to_json(m.classifier),
    }


def _model_from_json(d):
    if d is None:
        return None
    return TargetModel(_mlp_from_json(d["classifier"]), float.fromhex(d["train_accuracy"]), d["training_seed"], d["role"])


def _dataclass_to_json(obj):
    return {k: (float(v).hex() if isinstance(v, float) else v) for k, v in obj.__dict__.items()}


def _dataclass_from_json(cls, d):
    return cls(**{k: (float.fromhex(v) if isinstance(getattr(cls, k), float) else v) for k, v in d.items()})


def world_to_json(bundle: WorldBundle) -> dict:
    w = bundle.world
    g = w.generator
    gen = {"kind": g.kind, "z_dim": g.z_dim, "data_dim": g.data_dim}
    if g.kind == "linear":
        gen.update(matrix=_hex_array(g.matrix), bias=_hex_array(g.bias))
    elif g.kind == "mlp":
        gen.update(mlp=_mlp_to_json(g.mlp))
    return {
        "schema": "ppomi.world",
        "schema_version": WORLD_SCHEMA_VERSION,
        "float_encoding": "hex",
        "config": _dataclass_to_json(w.config),
        "creation_seed": w.creation_seed,
        "anchors": _hex_array(w.anchors),
        "centroids": _hex_array(w.centroids),
        "generator": gen,
        "train_config": _dataclass_to_json(bundle.train_config),
        "evaluator_config": _dataclass_to_json(bundle.evaluator_config),
        "target": _model_to_json(bundle.target),
        "evaluator": _model_to_json(bundle.evaluator),
    }


def world_from_json(d: dict) -> WorldBundle:
    if d.get("schema") != "ppomi.world":
        raise ValueError("not a world file")
    if d.get("schema_version") != WORLD_SCHEMA_VERSION:
        raise ValueError(f"unsupported world schema version {d.get('schema_version')!r}")
    cfg = _dataclass_from_json(WorldConfig, d["config"])
    gd = d["generator"]
    if gd["kind"] == "linear":
        gen = GeneratorSpec("linear", gd["z_dim"], gd["data_dim"], matrix=_unhex_array(gd["matrix"]), bias=_unhex_array(gd["bias"]))
    elif gd["kind"] == "mlp":
        gen = GeneratorSpec("mlp", gd["z_dim"], gd["data_dim"], mlp=_mlp_from_json(gd["mlp"]))
    else:
        gen = GeneratorSpec(gd["kind"], gd["z_dim"], gd["data_dim"])
    world = World(cfg, _unhex_array(d["anchors"]), _unhex_array(d["centroids"]), gen, d["creation_seed"])
    return WorldBundle(
        world,
        _model_from_json(d["target"]),
        _model_from_json(d["evaluator"]),
        _dataclass_from_json(TrainConfig, d["train_config"]),
        _dataclass_from_json(TrainConfig, d["evaluator_config"]),
    )


def save_world(bundle: WorldBundle, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(world_to_json(bundle), indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise ResultsIOError(f"cannot write world file: {exc}", path) from exc
    return path


def load_world(path) -> WorldBundle:
    path = Path(path)
    try:
        return world_from_json(json.loads(path.read_text()))
    except FileNotFoundError as exc:
        raise ResultsIOError("world file not found", path) from exc
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ResultsIOError(f"cannot read world file: {exc}", path) from exc
