"""The inversion MDP: states and actions are latent vectors.

Each step samples an action from the policy, blends it into the state with
momentum, renders both the state and the action through the generator and
asks the oracle about each (two queries per step).  The reward pays for the
target label on either point and adds an exploration bonus whenever the two
labels differ.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetError, ConfigError, ShapeError
from .numkit import Rng
from .worldgen import GeneratorSpec, Oracle, OracleResponse, generate


@dataclass(frozen=True)
class MdpConfig:
    target_class: int = 0
    alpha: float = 0.7
    lambda1: float = 2.0
    lambda2: float = 2.0
    lambda3: float = 8.0
    beta: float = 1.0
    max_steps: int = 8
    z_dim: int = 2
    # Rendered latents are clipped to this box; math.inf disables clipping.
    latent_bound: float = 3.0

    def validate(self, n_classes=None):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}", "mdp.alpha")
        for name in ("lambda1", "lambda2", "lambda3", "beta"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}", f"mdp.{name}")
        if self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}", "mdp.max_steps")
        if self.z_dim < 1:
            raise ConfigError(f"z_dim must be >= 1, got {self.z_dim}", "mdp.z_dim")
        if not self.latent_bound > 0:
            raise ConfigError(f"latent_bound must be > 0, got {self.latent_bound}", "mdp.latent_bound")
        if self.target_class < 0 or (n_classes is not None and self.target_class >= n_classes):
            raise ConfigError(f"target class {self.target_class} outside [0, {n_classes})", "mdp.target_class")
        return self


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray  # raw policy sample, before clipping to the latent box
    reward: float
    next_state: np.ndarray
    action_log_prob: float
    value_estimate: float
    terminal: bool = False


@dataclass(frozen=True)
class RewardBreakdown:
    r_class_state: int
    r_class_action: int
    r_explore: float
    total: float


@dataclass
class EpisodeRollout:
    transitions: list = field(default_factory=list)
    responses: list = field(default_factory=list)  # (resp_state, resp_action) per step
    rewards: list = field(default_factory=list)  # RewardBreakdown per step
    episode_score: float = 0.0
    best_latent: np.ndarray | None = None
    queries_used: int = 0
    budget_exhausted: bool = False

    def __len__(self):
        return len(self.transitions)


def init_state(z_dim: int, rng: Rng) -> np.ndarray:
    """Initial state drawn from N(0, I)."""
    if z_dim < 1:
        raise ConfigError("z_dim must be >= 1", "z_dim")
    return rng.normal(z_dim)


def momentum_transition(s, a, alpha: float) -> np.ndarray:
    """``alpha * s + (1 - alpha) * a``."""
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if s.shape != a.shape:
        raise ShapeError(f"state {s.shape} and action {a.shape} differ in shape")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}", "alpha")
    return alpha * s + (1.0 - alpha) * a


def clip_latent(z, bound: float) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return z if math.isinf(bound) else np.clip(z, -bound, bound)


def class_reward(resp: OracleResponse, y: int) -> int:
    if not 0 <= y < len(resp.probs):
        raise ConfigError(f"target class {y} outside [0, {len(resp.probs)})", "target_class")
    return int(resp.label == y)


def explore_reward(resp_s: OracleResponse, resp_a: OracleResponse, beta: float) -> float:
    return beta if resp_s.label != resp_a.label else 0.0


def compute_reward(resp_s: OracleResponse, resp_a: OracleResponse, cfg: MdpConfig) -> RewardBreakdown:
    cs = class_reward(resp_s, cfg.target_class)
    ca = class_reward(resp_a, cfg.target_class)
    ex = explore_reward(resp_s, resp_a, cfg.beta)
    return RewardBreakdown(cs, ca, ex, combine_reward(cs, ca, ex, cfg))


def combine_reward(class_state, class_action, explore, cfg: MdpConfig) -> float:
    """Weighted sum of the three reward terms (``explore`` already scaled by beta)."""
    return cfg.lambda1 * class_state + cfg.lambda2 * class_action + cfg.lambda3 * explore


def rollout_episode(policy, oracle: Oracle, generator: GeneratorSpec, cfg: MdpConfig, rng: Rng, *, reserve: int = 0):
    """Run one episode of at most ``cfg.max_steps`` steps.

    ``policy(state, rng) -> (action, log_prob, value)``.  A step is only
    started when the oracle can still answer both of its queries on top of
    ``reserve`` queries the caller keeps back; otherwise the episode is cut
    short and ``budget_exhausted`` is set.  The last collected transition is
    always marked terminal.
    """
    y = cfg.target_class
    ep = EpisodeRollout()
    s = clip_latent(init_state(cfg.z_dim, rng.split("s0")), cfg.latent_bound)
    act_rng = rng.split("actions")
    best = -math.inf
    for _ in range(cfg.max_steps):
        if oracle.remaining - reserve < 2:
            ep.budget_exhausted = True
            break
        a_raw, log_prob, value = policy(s, act_rng)
        a = clip_latent(a_raw, cfg.latent_bound)
        s_next = momentum_transition(s, a, cfg.alpha)
        try:
            resp_s = oracle.query(generate(generator, s))
            ep.queries_used += 1
            resp_a = oracle.query(generate(generator, a))
            ep.queries_used += 1
        except BudgetError:
            # Another worker sharing the oracle got there first.
            ep.budget_exhausted = True
            break
        rb = compute_reward(resp_s, resp_a, cfg)
        ep.transitions.append(Transition(s, np.asarray(a_raw, dtype=np.float64), rb.total, s_next, float(log_prob), float(value)))
        ep.responses.append((resp_s, resp_a))
        ep.rewards.append(rb)
        for z, resp in ((s, resp_s), (a, resp_a)):
            p = float(resp.probs[y])
            if p > best:
                best, ep.best_latent = p, z
        s = s_next
    if ep.transitions:
        last = ep.transitions[-1]
        ep.transitions[-1] = Transition(
            last.state, last.action, last.reward, last.next_state, last.action_log_prob, last.value_estimate, True
        )
        ep.episode_score = best
    return ep
