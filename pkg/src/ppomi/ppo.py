"""Actor-critic PPO and the PPO-MI attack loop.

The actor is a tanh MLP producing the mean of a diagonal Gaussian with a
state-independent log-std; the critic is a separate tanh MLP.  All
gradients are computed by hand through ``numkit``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DiagnosticsError, ShapeError, UsageError
from .mdp import MdpConfig, rollout_episode
from .numkit import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    MlpParams,
    Rng,
    adam_init,
    adam_step,
    clamp_log_std,
    gaussian_entropy,
    gaussian_log_prob,
    gaussian_log_prob_grad,
    gaussian_sample,
    global_norm,
    init_mlp,
    mlp_backward,
    mlp_forward,
)
from .worldgen import GeneratorSpec, Oracle, WorldBundle, generate


@dataclass(frozen=True)
class PpoConfig:
    clip_epsilon: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    update_epochs: int = 4
    minibatch_size: int = 32
    actor_lr: float = 3e-3
    critic_lr: float = 3e-3
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    max_episodes: int = 1000
    episodes_per_update: int = 8
    hidden: int = 32
    init_log_std: float = 0.5  # policy std ~1.65, about half the latent box at init

    def validate(self):
        checks = [
            ("clip_epsilon", self.clip_epsilon > 0, "> 0"),
            ("gamma", 0.0 <= self.gamma <= 1.0, "in [0, 1]"),
            ("gae_lambda", 0.0 <= self.gae_lambda <= 1.0, "in [0, 1]"),
            ("update_epochs", self.update_epochs >= 1, ">= 1"),
            ("minibatch_size", self.minibatch_size >= 1, ">= 1"),
            ("actor_lr", self.actor_lr > 0, "> 0"),
            ("critic_lr", self.critic_lr > 0, "> 0"),
            ("entropy_coef", self.entropy_coef >= 0, ">= 0"),
            ("value_coef", self.value_coef >= 0, ">= 0"),
            ("max_grad_norm", self.max_grad_norm > 0, "> 0"),
            ("max_episodes", self.max_episodes >= 0, ">= 0"),
            ("episodes_per_update", self.episodes_per_update >= 1, ">= 1"),
            ("hidden", self.hidden >= 1, ">= 1"),
            ("init_log_std", LOG_STD_MIN <= self.init_log_std <= LOG_STD_MAX, f"in [{LOG_STD_MIN}, {LOG_STD_MAX}]"),
        ]
        for name, ok, rule in checks:
            if not ok:
                raise ConfigError(f"{name} must be {rule}, got {getattr(self, name)}", f"ppo.{name}")
        return self


@dataclass
class ActorCriticParams:
    actor: MlpParams
    log_std: np.ndarray
    critic: MlpParams

    @property
    def z_dim(self):
        return self.actor.in_dim

    def arrays(self):
        return self.actor.arrays() + [self.log_std] + self.critic.arrays()

    def with_arrays(self, arrays):
        arrays = list(arrays)
        k = len(self.actor.arrays())
        return ActorCriticParams(self.actor.with_arrays(arrays[:k]), arrays[k], self.critic.with_arrays(arrays[k + 1 :]))

    def actor_arrays(self):
        return self.actor.arrays() + [self.log_std]

    def copy(self):
        return self.with_arrays(a.copy() for a in self.arrays())


def init_actor_critic(z_dim: int, cfg: PpoConfig, rng: Rng) -> ActorCriticParams:
    actor = init_mlp([z_dim, cfg.hidden, z_dim], rng.split("actor"))
    # Small output layer so the initial policy is close to N(0, exp(init_log_std)^2).
    actor.weights[-1] *= 0.01
    critic = init_mlp([z_dim, cfg.hidden, 1], rng.split("critic"))
    return ActorCriticParams(actor, np.full(z_dim, float(cfg.init_log_std)), critic)


def policy_act(ac: ActorCriticParams, s, rng: Rng):
    """Sample an action; returns ``(action, log_prob, value)``."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (ac.z_dim,):
        raise ShapeError(f"state shape {s.shape} != ({ac.z_dim},)")
    mean = mlp_forward(ac.actor, s)[0]
    a, log_prob = gaussian_sample(mean, ac.log_std, rng)
    value = float(mlp_forward(ac.critic, s)[0][0])
    return a, float(log_prob), value


# ---------------------------------------------------------------------------
# advantages


@dataclass
class GaeOutput:
    advantages: np.ndarray
    returns: np.ndarray
    raw_advantages: np.ndarray


def compute_gae(rewards, values, terminals, bootstrap_value, gamma, gae_lambda, normalize=True) -> GaeOutput:
    """Generalized advantage estimates over a (possibly multi-episode) sequence.

    ``values[t]`` is V(s_t); the value after the last step is
    ``bootstrap_value``.  A terminal flag cuts both bootstrapping and the
    advantage recursion, so several episodes may be concatenated.
    Returns are built from the raw advantages; only ``advantages`` is
    normalized.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    done = np.asarray(terminals, dtype=np.float64)
    if not (r.shape == v.shape == done.shape) or r.ndim != 1:
        raise ShapeError(f"rewards {r.shape}, values {v.shape}, terminals {done.shape} must be equal-length vectors")
    if not (0.0 <= gamma <= 1.0 and 0.0 <= gae_lambda <= 1.0):
        raise ConfigError("gamma and gae_lambda must lie in [0, 1]")
    n = len(r)
    adv = np.zeros(n)
    next_value = float(bootstrap_value)
    last = 0.0
    for t in range(n - 1, -1, -1):
        nonterminal = 1.0 - done[t]
        delta = r[t] + gamma * next_value * nonterminal - v[t]
        last = delta + gamma * gae_lambda * nonterminal * last
        adv[t] = last
        next_value = v[t]
    returns = adv + v
    normed = adv
    if normalize and n > 1:
        normed = (adv - adv.mean()) / (adv.std() + 1e-8)
    return GaeOutput(normed, returns, adv)


# ---------------------------------------------------------------------------
# loss and update


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self):
        return len(self.states)

    def take(self, idx):
        return Batch(self.states[idx], self.actions[idx], self.old_log_probs[idx], self.advantages[idx], self.returns[idx])


def make_batch(transitions, gae: GaeOutput) -> Batch:
    return Batch(
        np.array([t.state for t in transitions]),
        np.array([t.action for t in transitions]),
        np.array([t.action_log_prob for t in transitions]),
        np.asarray(gae.advantages, dtype=np.float64),
        np.asarray(gae.returns, dtype=np.float64),
    )


@dataclass
class LossInfo:
    loss: float
    actor_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    clip_fraction: float


def ppo_loss(ac: ActorCriticParams, batch: Batch, cfg: PpoConfig):
    """Clipped-surrogate loss plus value and entropy terms.

    Returns ``(loss, grads, info)`` with ``grads`` an ``ActorCriticParams``
    holding the exact gradient of ``loss``.
    """
    n = len(batch)
    if n == 0:
        raise UsageError("ppo_loss needs a non-empty batch")
    eps = cfg.clip_epsilon
    mean, a_cache = mlp_forward(ac.actor, batch.states)
    logp = gaussian_log_prob(mean, ac.log_std, batch.actions)
    log_ratio = logp - batch.old_log_probs
    ratio = np.exp(log_ratio)
    adv = batch.advantages
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    actor_loss = -float(np.mean(np.minimum(surr1, surr2)))
    # Gradient flows only through the unclipped branch when it is the active minimum.
    d_logp = np.where(surr1 <= surr2, -adv * ratio / n, 0.0)

    values, c_cache = mlp_forward(ac.critic, batch.states)
    values = values[:, 0]
    err = values - batch.returns
    value_loss = float(np.mean(err * err))
    d_values = cfg.value_coef * 2.0 * err / n

    entropy = gaussian_entropy(ac.log_std)
    loss = actor_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy

    d_mean, d_ls = gaussian_log_prob_grad(mean, ac.log_std, batch.actions)
    g_actor, _ = mlp_backward(ac.actor, a_cache, d_logp[:, None] * d_mean)
    in_range = (ac.log_std >= LOG_STD_MIN) & (ac.log_std <= LOG_STD_MAX)
    g_log_std = (d_logp[:, None] * d_ls).sum(axis=0) - cfg.entropy_coef * in_range
    g_critic, _ = mlp_backward(ac.critic, c_cache, d_values[:, None])
    grads = ActorCriticParams(g_actor, g_log_std, g_critic)

    info = LossInfo(
        loss,
        actor_loss,
        value_loss,
        entropy,
        approx_kl=float(np.mean((ratio - 1.0) - log_ratio)),
        clip_fraction=float(np.mean(np.abs(ratio - 1.0) > eps)),
    )
    return loss, grads, info


@dataclass
class UpdateStats:
    approx_kl: float
    clip_fraction: float
    loss: float
    actor_loss: float
    value_loss: float
    entropy: float
    n_transitions: int


@dataclass
class Optimizers:
    actor: object
    critic: object


def init_optimizers(ac: ActorCriticParams, cfg: PpoConfig) -> Optimizers:
    return Optimizers(adam_init(ac.actor_arrays(), lr=cfg.actor_lr), adam_init(ac.critic.arrays(), lr=cfg.critic_lr))


def _clip_by_global_norm(arrays, max_norm):
    norm = global_norm(arrays)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        return [a * scale for a in arrays]
    return arrays


def ppo_update(ac: ActorCriticParams, rollouts, cfg: PpoConfig, opt: Optimizers, rng: Rng):
    """Run ``update_epochs`` passes of shuffled minibatches over the rollouts.

    ``rollouts`` is a list of episodes (each a list of transitions or an
    ``EpisodeRollout``).  Returns ``(new_ac, new_opt, UpdateStats)``.
    """
    transitions = [t for ep in rollouts for t in (ep.transitions if hasattr(ep, "transitions") else ep)]
    if not transitions:
        raise UsageError("ppo_update needs at least one transition")
    # Episodes are concatenated; every episode ends with a terminal flag so the bootstrap value is unused.
    terminals = [t.terminal for t in transitions]
    terminals[-1] = True
    gae = compute_gae(
        [t.reward for t in transitions],
        [t.value_estimate for t in transitions],
        terminals,
        0.0,
        cfg.gamma,
        cfg.gae_lambda,
    )
    batch = make_batch(transitions, gae)
    n = len(batch)
    n_actor = len(ac.actor_arrays())
    infos = []
    for _ in range(cfg.update_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            mb = batch.take(perm[start : start + cfg.minibatch_size])
            loss, grads, info = ppo_loss(ac, mb, cfg)
            if not (math.isfinite(loss) and math.isfinite(info.approx_kl)):
                raise DiagnosticsError(
                    f"non-finite PPO loss (loss={loss}, value_loss={info.value_loss}, approx_kl={info.approx_kl})"
                )
            infos.append(info)
            g = _clip_by_global_norm(grads.arrays(), cfg.max_grad_norm)
            actor_p, opt.actor = adam_step(opt.actor, ac.actor_arrays(), g[:n_actor])
            critic_p, opt.critic = adam_step(opt.critic, ac.critic.arrays(), g[n_actor:])
            actor_p[-1] = clamp_log_std(actor_p[-1])
            ac = ac.with_arrays(actor_p + critic_p)
    stats = UpdateStats(
        approx_kl=float(np.mean([i.approx_kl for i in infos])),
        clip_fraction=float(np.mean([i.clip_fraction for i in infos])),
        loss=float(np.mean([i.loss for i in infos])),
        actor_loss=float(np.mean([i.actor_loss for i in infos])),
        value_loss=float(np.mean([i.value_loss for i in infos])),
        entropy=float(np.mean([i.entropy for i in infos])),
        n_transitions=n,
    )
    return ac, opt, stats


# ---------------------------------------------------------------------------
# attack loop


@dataclass
class AttackOutcome:
    method: str
    target_class: int
    seed: int
    best_latent: np.ndarray
    best_score: float
    score_trace: list = field(default_factory=list)  # running best score after each episode
    query_trace: list = field(default_factory=list)  # cumulative queries after each episode
    episodes_run: int = 0
    queries_used: int = 0
    query_budget: int | None = None
    oracle_query_count: int = 0
    found: bool = False
    wall_clock_seconds: float = 0.0
    success_top1: bool | None = None
    success_top5: bool | None = None
    update_stats: list = field(default_factory=list)
    world_seed: int | None = None
    extras: dict = field(default_factory=dict)

    @property
    def run_id(self):
        return f"{self.method}-c{self.target_class}-s{self.seed}"


def current_score(oracle: Oracle, generator: GeneratorSpec, z, y: int) -> float:
    """Soft probability of class ``y`` at ``G(z)``; costs one query."""
    return float(oracle.query(generate(generator, z)).probs[y])


def run_attack(bundle: WorldBundle, mdp_cfg: MdpConfig, ppo_cfg: PpoConfig, seed: int, query_budget: int | None, rng: Rng | None = None, oracle: Oracle | None = None) -> AttackOutcome:
    """PPO-MI against a fresh budgeted oracle on ``bundle.target``.

    Episodes are collected in windows of ``episodes_per_update``; after each
    window the policy is updated and every episode's best latent is
    re-scored with one query, replacing z* only on strict improvement.
    """
    if bundle.target is None:
        raise UsageError("run_attack needs a world with a trained target")
    world = bundle.world
    mdp_cfg.validate(world.n_classes)
    ppo_cfg.validate()
    if mdp_cfg.z_dim != world.z_dim:
        raise ConfigError(f"mdp.z_dim={mdp_cfg.z_dim} but the world has z_dim={world.z_dim}", "mdp.z_dim")
    if query_budget is not None and query_budget < 1:
        raise ConfigError(f"query budget must be positive, got {query_budget}", "campaign.query_budget")
    t0 = time.perf_counter()
    rng = rng if rng is not None else Rng(seed, "ppo_mi", mdp_cfg.target_class)
    oracle = oracle if oracle is not None else Oracle(bundle.target, query_budget)
    y = mdp_cfg.target_class
    gen = world.generator
    ac = init_actor_critic(world.z_dim, ppo_cfg, rng.split("init"))
    opt = init_optimizers(ac, ppo_cfg)
    out = AttackOutcome("ppo_mi", y, seed, np.zeros(world.z_dim), 0.0, query_budget=query_budget, world_seed=world.creation_seed)
    queries = 0
    episode = 0
    exhausted = False

    def act(s, r):
        return policy_act(ac, s, r)

    while episode < ppo_cfg.max_episodes and not exhausted:
        window = []
        while len(window) < ppo_cfg.episodes_per_update and episode + len(window) < ppo_cfg.max_episodes:
            # keep one scoring query back for this episode and for each earlier one in the window
            reserve = len(window) + 1
            if oracle.remaining - reserve < 2:
                exhausted = True
                break
            ep = rollout_episode(act, oracle, gen, mdp_cfg, rng.split("episode", episode + len(window)), reserve=reserve)
            queries += ep.queries_used
            if ep.transitions:
                window.append(ep)
            if ep.budget_exhausted:
                exhausted = True
                break
        if not window:
            break
        ac, opt, stats = ppo_update(ac, window, ppo_cfg, opt, rng.split("update", episode))
        out.update_stats.append(stats)
        for ep in window:
            if oracle.remaining >= 1:
                score = current_score(oracle, gen, ep.best_latent, y)
                queries += 1
                if score > out.best_score:
                    out.best_score = score
                    out.best_latent = np.array(ep.best_latent)
                    out.found = True
            episode += 1
            out.score_trace.append(out.best_score)
            out.query_trace.append(queries)
    out.episodes_run = episode
    out.queries_used = queries
    out.oracle_query_count = oracle.query_count
    out.wall_clock_seconds = time.perf_counter() - t0
    return out
