import threading

import numpy as np
import pytest

from oracles import straight_line_mlp
from ppomi.errors import BudgetError, ConfigError, ResultsIOError, ShapeError, TrainingError, UsageError
from ppomi.numkit import Rng
from ppomi.worldgen import (
    GeneratorSpec,
    Oracle,
    TrainConfig,
    WorldBundle,
    WorldConfig,
    build_world,
    generate,
    load_world,
    make_world,
    oracle_query,
    predict_proba,
    sample_labeled_data,
    save_world,
    train_evaluator,
    train_target,
    world_to_json,
)


def test_make_world_is_deterministic():
    assert make_world(WorldConfig(), 5) == make_world(WorldConfig(), 5)
    assert make_world(WorldConfig(), 5) != make_world(WorldConfig(), 6)


@pytest.mark.parametrize("seed", range(20))
def test_centroids_are_separated(seed):
    for cfg in (WorldConfig(n_classes=2), WorldConfig(), WorldConfig(n_classes=6, class_spread=0.6)):
        w = make_world(cfg, seed)
        d = np.linalg.norm(w.centroids[:, None] - w.centroids[None], axis=-1)
        assert d[np.triu_indices(cfg.n_classes, 1)].min() >= 4 * cfg.class_spread - 1e-12


def test_rescaling_fallback_keeps_separation():
    cfg = WorldConfig(n_classes=3, class_spread=2.0, anchor_radius=0.1)
    w = make_world(cfg, 0)
    d = np.linalg.norm(w.centroids[:, None] - w.centroids[None], axis=-1)
    assert d[np.triu_indices(3, 1)].min() >= 8.0 - 1e-9


@pytest.mark.parametrize(
    "cfg",
    [WorldConfig(n_classes=1), WorldConfig(z_dim=3, data_dim=2), WorldConfig(generator="gan"), WorldConfig(class_spread=0.0)],
)
def test_bad_world_configs(cfg):
    with pytest.raises(ConfigError):
        make_world(cfg, 0)


def test_generate_kinds():
    z = np.array([0.3, -0.7])
    assert np.array_equal(generate(GeneratorSpec("identity", 2, 2), z), z)
    lin = GeneratorSpec("linear", 2, 2, matrix=2 * np.eye(2), bias=np.zeros(2))
    assert np.array_equal(generate(lin, np.array([1.0, 1.0])), [2.0, 2.0])
    w = make_world(WorldConfig(z_dim=4, data_dim=8, n_classes=8, generator="mlp"), 1)
    z = Rng(2).normal(4)
    np.testing.assert_allclose(
        generate(w.generator, z), straight_line_mlp(w.generator.mlp.weights, w.generator.mlp.biases, z), atol=1e-12
    )
    with pytest.raises(ShapeError):
        generate(w.generator, np.zeros(3))


def test_sampling_counts_and_degenerate_spread():
    w = make_world(WorldConfig(class_spread=1e-9), 0)
    x, labels = sample_labeled_data(w, 7, Rng(0))
    assert len(x) == len(labels) == 4 * 7
    assert np.all(np.linalg.norm(x - w.centroids[labels], axis=1) < 1e-6)


def test_sampling_class_means_monte_carlo():
    w = make_world(WorldConfig(), 1)
    x, labels = sample_labeled_data(w, 10_000, Rng(3))
    for c in range(w.n_classes):
        assert np.all(np.abs(x[labels == c].mean(axis=0) - w.centroids[c]) < 0.05)


def test_target_accuracy_on_two_class_world(two_class_world):
    b = two_class_world
    assert b.target.train_accuracy >= 0.99
    x, labels = sample_labeled_data(b.world, 2000, Rng(99, "fresh"))
    fresh = np.mean(np.argmax(predict_proba(b.target, x), axis=1) == labels)
    assert fresh >= 0.99


def test_zero_epochs_fails():
    w = make_world(WorldConfig(), 0)
    with pytest.raises(TrainingError, match="accuracy"):
        train_target(w, TrainConfig(epochs=0), Rng(0))


def test_training_is_deterministic():
    w = make_world(WorldConfig(), 0)
    a = train_target(w, TrainConfig(epochs=5), Rng(1))
    b = train_target(w, TrainConfig(epochs=5, min_accuracy=0.0), Rng(1))
    assert a == b


def test_evaluator_differs_but_agrees(default_world):
    b = default_world
    assert b.evaluator.classifier.sizes != b.target.classifier.sizes
    assert b.evaluator.train_accuracy >= 0.95 and b.target.train_accuracy >= 0.95
    x, _ = sample_labeled_data(b.world, 2500, Rng(5, "fresh"))
    disagree = np.mean(np.argmax(predict_proba(b.target, x), 1) != np.argmax(predict_proba(b.evaluator, x), 1))
    assert disagree < 0.05
    other = train_evaluator(b.world, b.evaluator_config, Rng(12345))
    assert other != b.evaluator


def test_oracle_counts_and_budget(default_world):
    o = Oracle(default_world.target, query_budget=3)
    x = np.array([0.1, 0.2])
    r1, r2 = oracle_query(o, x), oracle_query(o, x)
    assert r1.label == r2.label and np.array_equal(r1.probs, r2.probs)
    assert o.query_count == 2
    assert r1.label == int(np.argmax(r1.probs))
    assert abs(r1.probs.sum() - 1) <= 1e-12
    o.query(x)
    with pytest.raises(BudgetError) as exc:
        o.query(x)
    assert exc.value.query_count == 3
    assert o.query_count == 3


def test_oracle_budget_one():
    b = build_world(WorldConfig(), 0)
    o = Oracle(b.target, 1)
    o.query(np.zeros(2))
    with pytest.raises(BudgetError):
        o.query(np.zeros(2))


def test_oracle_surface_exposes_no_model(default_world):
    o = Oracle(default_world.target, 10)
    public = {n for n in dir(o) if not n.startswith("_")}
    assert public == {"query", "query_count", "query_budget", "remaining", "n_classes"}


def test_oracle_is_thread_safe(default_world):
    o = Oracle(default_world.target, 500)
    ok = []

    def worker():
        n = 0
        while True:
            try:
                o.query(np.zeros(2))
                n += 1
            except BudgetError:
                ok.append(n)
                return

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sum(ok) == 500 == o.query_count


def test_world_round_trip_is_bit_exact(tmp_path, default_world):
    p = save_world(default_world, tmp_path / "w.json")
    back = load_world(p)
    assert back.world == default_world.world
    assert back.target == default_world.target and back.evaluator == default_world.evaluator
    assert world_to_json(back) == world_to_json(default_world)


def test_mlp_world_round_trip(tmp_path):
    cfg = WorldConfig(z_dim=4, data_dim=8, n_classes=8, generator="mlp")
    b = WorldBundle(make_world(cfg, 2))
    back = load_world(save_world(b, tmp_path / "m.json"))
    assert back.world == b.world
    with pytest.raises(UsageError):
        back.require_trained()


def test_same_seed_gives_byte_identical_world_files(tmp_path):
    a = save_world(build_world(WorldConfig(), 4), tmp_path / "a.json").read_bytes()
    b = save_world(build_world(WorldConfig(), 4), tmp_path / "b.json").read_bytes()
    assert a == b


def test_load_world_errors(tmp_path):
    with pytest.raises(ResultsIOError):
        load_world(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ResultsIOError, match="bad.json"):
        load_world(bad)
