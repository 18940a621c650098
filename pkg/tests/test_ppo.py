import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_gae, central_difference, rel_err
from ppomi.errors import ShapeError, UsageError
from ppomi.mdp import MdpConfig, Transition
from ppomi.numkit import Rng, gaussian_log_prob
from ppomi.ppo import (
    Batch,
    PpoConfig,
    compute_gae,
    current_score,
    init_actor_critic,
    init_optimizers,
    policy_act,
    ppo_loss,
    ppo_update,
    run_attack,
)
from ppomi.worldgen import Oracle, WorldBundle, make_world, WorldConfig


def test_policy_act_shapes_and_log_prob():
    ac = init_actor_critic(3, PpoConfig(), Rng(0))
    s = np.array([0.2, -0.1, 0.5])
    a, lp, v = policy_act(ac, s, Rng(1))
    assert a.shape == (3,) and isinstance(v, float)
    mean = ac.actor.weights[1] @ np.tanh(ac.actor.weights[0] @ s + ac.actor.biases[0]) + ac.actor.biases[1]
    assert lp == pytest.approx(gaussian_log_prob(mean, ac.log_std, a), abs=1e-12)
    with pytest.raises(ShapeError):
        policy_act(ac, np.zeros(2), Rng(1))


def test_policy_act_degenerate_std():
    ac = init_actor_critic(2, PpoConfig(init_log_std=-5.0), Rng(0))
    s = np.array([1.0, 2.0])
    mean = ac.actor.weights[1] @ np.tanh(ac.actor.weights[0] @ s + ac.actor.biases[0]) + ac.actor.biases[1]
    for k in range(20):
        a, _, _ = policy_act(ac, s, Rng(k))
        assert np.all(np.abs(a - mean) <= 5 * math.exp(-5))  # five standard deviations


# ---------------------------------------------------------------------------
# GAE


def test_gae_single_step_terminal():
    g = compute_gae([1.0], [0.5], [True], 9.0, 0.99, 0.95, normalize=False)
    assert g.raw_advantages[0] == pytest.approx(0.5, abs=1e-15)
    assert g.returns[0] == pytest.approx(1.0, abs=1e-15)


def test_gae_lambda_one_is_monte_carlo():
    r, v = np.array([1.0, 0.0, 2.0]), np.array([0.3, -0.2, 0.7])
    g = compute_gae(r, v, [False, False, True], 0.0, 0.9, 1.0, normalize=False)
    mc = np.array([1 + 0.9 * 0 + 0.81 * 2, 0 + 0.9 * 2, 2.0])
    np.testing.assert_allclose(g.returns, mc, atol=1e-12)


def test_gae_normalization():
    rng = Rng(0)
    g = compute_gae(rng.normal(10), rng.normal(10), [False] * 9 + [True], 0.0, 0.99, 0.95)
    assert abs(g.advantages.mean()) < 1e-12 and abs(g.advantages.std() - 1) < 1e-6
    g1 = compute_gae([3.0], [1.0], [True], 0.0, 0.99, 0.95)
    assert g1.advantages[0] == 2.0  # a single sample is left as is


def test_gae_shape_error():
    with pytest.raises(ShapeError):
        compute_gae([1.0, 2.0], [1.0], [True, True], 0.0, 0.99, 0.95)


def test_gae_matches_brute_force_oracle_on_100_episodes():
    rng = Rng(42, "gae")
    worst = 0.0
    for i in range(100):
        n = int(rng.integers(1, 17))
        r, v = rng.normal(n) * 5, rng.normal(n)
        done = rng.uniform(0, 1, n) < 0.2
        boot = float(rng.normal(()))
        gamma, lam = float(rng.uniform(0.8, 1.0)), float(rng.uniform(0.0, 1.0))
        g = compute_gae(r, v, done, boot, gamma, lam, normalize=False)
        worst = max(worst, float(np.max(np.abs(g.raw_advantages - brute_force_gae(r, v, done, boot, gamma, lam)))))
    assert worst <= 1e-10


@settings(max_examples=200, deadline=None)
@given(
    st.integers(1, 16).flatmap(
        lambda n: st.tuples(
            st.lists(st.floats(-10, 10), min_size=n, max_size=n),
            st.lists(st.floats(-10, 10), min_size=n, max_size=n),
            st.lists(st.booleans(), min_size=n, max_size=n),
        )
    ),
    st.floats(-10, 10),
    st.floats(0, 1),
    st.floats(0, 1),
)
def test_gae_oracle_property(episode, boot, gamma, lam):
    r, v, done = episode
    g = compute_gae(r, v, done, boot, gamma, lam, normalize=False)
    np.testing.assert_allclose(g.raw_advantages, brute_force_gae(r, v, done, boot, gamma, lam), rtol=0, atol=1e-10)
    np.testing.assert_allclose(g.returns, g.raw_advantages + np.asarray(v), atol=1e-12)


# ---------------------------------------------------------------------------
# loss


def _batch(ac, rng, n=12, spread=0.0):
    z = ac.z_dim
    states = rng.normal((n, z))
    actions = rng.normal((n, z))
    mean = np.array([ac.actor.weights[1] @ np.tanh(ac.actor.weights[0] @ s + ac.actor.biases[0]) + ac.actor.biases[1] for s in states])
    logp = gaussian_log_prob(mean, ac.log_std, actions)
    old = logp + spread * rng.normal(n)
    return Batch(states, actions, old, rng.normal(n), rng.normal(n))


def test_ratio_one_loss_is_minus_mean_advantage():
    ac = init_actor_critic(2, PpoConfig(), Rng(0))
    b = _batch(ac, Rng(1))
    cfg = PpoConfig(value_coef=0.0, entropy_coef=0.0)
    loss, _, info = ppo_loss(ac, b, cfg)
    assert loss == pytest.approx(-b.advantages.mean(), abs=1e-12)
    assert info.approx_kl == pytest.approx(0.0, abs=1e-12) and info.clip_fraction == 0.0


def test_clipped_sample_has_zero_actor_gradient():
    ac = init_actor_critic(2, PpoConfig(), Rng(0))
    b = _batch(ac, Rng(2), n=1)
    # ratio = e^{0.5} > 1.2 with a positive advantage: clipping binds
    b = Batch(b.states, b.actions, b.old_log_probs - 0.5, np.array([1.3]), b.returns)
    cfg = PpoConfig(value_coef=0.0, entropy_coef=0.0)
    loss, grads, info = ppo_loss(ac, b, cfg)
    assert loss == pytest.approx(-1.2 * 1.3, abs=1e-12)
    assert info.clip_fraction == 1.0
    assert all(not a.any() for a in grads.actor_arrays())


@pytest.mark.parametrize("seed", range(12))
def test_ppo_loss_gradient_finite_differences(seed):
    rng = Rng(seed, "ppo-fd")
    cfg = PpoConfig(hidden=6, entropy_coef=0.05, clip_epsilon=0.2)
    ac = init_actor_critic(2 + seed % 2, cfg, rng.split("init"))
    ac.actor.weights[-1] *= 50.0  # undo the small-init so the actor gradient is not tiny
    ac.log_std[:] = rng.uniform(-1.0, 1.0, ac.z_dim)
    b = _batch(ac, rng.split("batch"), n=16, spread=0.3)

    def f(arrays):
        return ppo_loss(ac.with_arrays(arrays), b, cfg)[0]

    _, grads, _ = ppo_loss(ac, b, cfg)
    direction = [rng.normal(a.shape) for a in ac.arrays()]
    analytic = sum(float(np.sum(g * d)) for g, d in zip(grads.arrays(), direction))
    numeric = central_difference(f, ac.arrays(), direction)
    assert rel_err(analytic, numeric) <= 1e-4


def test_ppo_loss_empty_batch():
    ac = init_actor_critic(2, PpoConfig(), Rng(0))
    with pytest.raises(UsageError):
        ppo_loss(ac, Batch(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.zeros(0), np.zeros(0)), PpoConfig())


# ---------------------------------------------------------------------------
# update


def _fake_episodes(ac, rng, n_eps=3, length=4, reward=None):
    eps = []
    for e in range(n_eps):
        s = rng.normal(ac.z_dim)
        ep = []
        for t in range(length):
            a, lp, v = policy_act(ac, s, rng)
            r = float(rng.normal(())) if reward is None else reward
            ep.append(Transition(s, a, r, 0.5 * s + 0.5 * a, lp, v, t == length - 1))
            s = 0.5 * s + 0.5 * a
        eps.append(ep)
    return eps


def test_update_with_zero_gradient_leaves_actor():
    # one transition: the normalized advantage is passed through, so force it to zero via a perfect critic
    cfg = PpoConfig(entropy_coef=0.0, update_epochs=2)
    ac = init_actor_critic(2, cfg, Rng(0))
    s = np.array([0.1, 0.2])
    a, lp, v = policy_act(ac, s, Rng(1))
    ep = [Transition(s, a, v, s, lp, v, True)]  # reward == value gives advantage 0
    new, _, stats = ppo_update(ac, [ep], cfg, init_optimizers(ac, cfg), Rng(2))
    for x, y in zip(ac.actor_arrays(), new.actor_arrays()):
        assert np.array_equal(x, y)
    assert stats.clip_fraction == 0.0


def test_update_stats_and_determinism():
    cfg = PpoConfig(minibatch_size=5)
    ac = init_actor_critic(2, cfg, Rng(0))
    eps = _fake_episodes(ac, Rng(3))
    a1, _, s1 = ppo_update(ac, eps, cfg, init_optimizers(ac, cfg), Rng(4))
    a2, _, s2 = ppo_update(ac, eps, cfg, init_optimizers(ac, cfg), Rng(4))
    assert all(np.array_equal(x, y) for x, y in zip(a1.arrays(), a2.arrays()))
    assert 0.0 <= s1.clip_fraction <= 1.0 and math.isfinite(s1.approx_kl)
    assert s1 == s2 and s1.n_transitions == 12
    assert np.all((a1.log_std >= -5) & (a1.log_std <= 2))


def test_update_rejects_empty():
    cfg = PpoConfig()
    ac = init_actor_critic(2, cfg, Rng(0))
    with pytest.raises(UsageError):
        ppo_update(ac, [], cfg, init_optimizers(ac, cfg), Rng(0))


# ---------------------------------------------------------------------------
# attack


def test_current_score(default_world):
    o = Oracle(default_world.target, 10)
    w = default_world.world
    for y in range(w.n_classes):
        s = current_score(o, w.generator, w.anchors[y], y)
        assert 0.95 <= s <= 1.0
    assert o.query_count == w.n_classes


def test_zero_episodes(default_world):
    out = run_attack(default_world, MdpConfig(), PpoConfig(max_episodes=0), 0, 100)
    assert out.episodes_run == 0 and out.best_score == 0.0 and not out.found and out.queries_used == 0


def test_attack_trace_and_accounting(default_world):
    out = run_attack(default_world, MdpConfig(target_class=1), PpoConfig(max_episodes=40), 3, 2000)
    assert out.episodes_run == 40 == len(out.score_trace)
    assert all(b >= a for a, b in zip(out.score_trace, out.score_trace[1:]))
    assert out.best_score == max(out.score_trace)
    assert out.queries_used == out.oracle_query_count == 40 * 17
    assert out.found and out.best_score > 0.9


def test_attack_respects_small_budget(default_world):
    for budget in (1, 2, 3, 18, 19, 137):
        out = run_attack(default_world, MdpConfig(), PpoConfig(), 0, budget)
        assert out.queries_used == out.oracle_query_count <= budget


def test_attack_is_bit_reproducible(default_world):
    a = run_attack(default_world, MdpConfig(target_class=2), PpoConfig(max_episodes=24), 5, 1000)
    b = run_attack(default_world, MdpConfig(target_class=2), PpoConfig(max_episodes=24), 5, 1000)
    assert a.score_trace == b.score_trace and np.array_equal(a.best_latent, b.best_latent)
    assert [s.approx_kl for s in a.update_stats] == [s.approx_kl for s in b.update_stats]


def test_attack_needs_trained_target():
    with pytest.raises(UsageError):
        run_attack(WorldBundle(make_world(WorldConfig(), 0)), MdpConfig(), PpoConfig(), 0, 100)
