"""Small deterministic numerical kernel.

Dense tanh multilayer perceptrons with hand-written backward passes, a
stable softmax, bias-corrected Adam, diagonal-Gaussian sampling and
log-densities, and a counter-based splittable random stream.  Everything
runs in float64 on numpy arrays; no autodiff graph is built anywhere.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# random streams


def derive_seed(*labels) -> int:
    """Stable 64-bit seed from an arbitrary tuple of labels.

    Uses blake2b over the ``repr`` of each label, so it does not depend on
    ``PYTHONHASHSEED`` or on the order in which streams are created.
    """
    h = hashlib.blake2b(digest_size=8)
    for label in labels:
        h.update(repr(label).encode())
        h.update(b"\x1f")
    return struct.unpack("<Q", h.digest())[0]


class Rng:
    """Counter-based (Philox) random stream with keyed splitting.

    ``Rng(seed)`` and ``Rng(seed).split("x")`` are independent streams;
    splitting never consumes draws from the parent, so child streams do not
    depend on how much the parent has been used.
    """

    def __init__(self, seed: int, *labels):
        self.key = derive_seed(int(seed), *labels) if labels else int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.key))

    def split(self, *labels) -> "Rng":
        return Rng(self.key, "split", *labels)

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def __repr__(self):
        return f"Rng(key={self.key:#018x})"


# ---------------------------------------------------------------------------
# multilayer perceptrons


@dataclass
class MlpParams:
    """Weights ``W[i]`` of shape (out, in) and biases ``b[i]`` of shape (out,).

    Hidden layers use tanh, the last layer is linear.  The same class holds
    gradients, which are shape-isomorphic to the parameters.
    """

    weights: list
    biases: list
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(
                    f"layer {i} expects {w.shape[1]} inputs, previous layer emits "
                    f"{self.weights[i - 1].shape[0]}"
                )

    @property
    def sizes(self) -> list:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_arrays(self, arrays) -> "MlpParams":
        arrays = list(arrays)
        return MlpParams(arrays[0::2], arrays[1::2], self.activation)

    def zeros_like(self) -> "MlpParams":
        return self.with_arrays(np.zeros_like(a) for a in self.arrays())

    def copy(self) -> "MlpParams":
        return self.with_arrays(a.copy() for a in self.arrays())


# Gradients share the parameter container.
ParamGrads = MlpParams


def init_mlp(sizes, rng: Rng, scale: float = 1.0) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
        raise ShapeError(f"bad layer sizes {sizes!r}")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = scale * math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


@dataclass
class MlpCache:
    inputs: list = field(default_factory=list)  # input to each layer
    hidden: list = field(default_factory=list)  # tanh outputs of hidden layers
    squeeze: bool = False


def mlp_forward(params: MlpParams, x):
    """Evaluate the network on one vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2 or h.shape[1] != params.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match network in-dim {params.in_dim}")
    cache = MlpCache(squeeze=squeeze)
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        h = h @ w.T + b
        if i < last:
            h = np.tanh(h)
            cache.hidden.append(h)
    return (h[0] if squeeze else h), cache


def mlp_backward(params: MlpParams, cache: MlpCache, output_grad):
    """Exact gradients of ``sum(output * output_grad)``.

    Returns ``(ParamGrads, input_grad)``; for a batch the parameter
    gradients are summed over rows.
    """
    g = np.asarray(output_grad, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    n_layers = len(params.weights)
    if len(cache.inputs) != n_layers or g.shape != (cache.inputs[0].shape[0], params.out_dim):
        raise ShapeError(f"output gradient shape {np.shape(output_grad)} does not match the cache")
    gw = [None] * n_layers
    gb = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        gw[i] = g.T @ cache.inputs[i]
        gb[i] = g.sum(axis=0)
        g = g @ params.weights[i]
        if i > 0:
            g = g * (1.0 - cache.hidden[i - 1] ** 2)
    return ParamGrads(gw, gb, params.activation), (g[0] if cache.squeeze else g)


def softmax(logits):
    """Row-wise softmax with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise ShapeError("softmax of an empty vector")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def argmax_lowest(values) -> int:
    """Index of the maximum; ties go to the lowest index (numpy's rule)."""
    return int(np.argmax(values))


def global_norm(arrays) -> float:
    return math.sqrt(sum(float(np.sum(a * a)) for a in arrays))


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    arrays = _arrays(params)
    return AdamState([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0, lr, beta1, beta2, eps)


def _arrays(tree):
    return tree.arrays() if hasattr(tree, "arrays") else list(tree)


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    ``params`` and ``grads`` may be any container exposing ``arrays()`` /
    ``with_arrays()`` (MlpParams, ActorCriticParams) or plain lists.
    """
    p_arr, g_arr = _arrays(params), _arrays(grads)
    if len(p_arr) != len(g_arr) or len(p_arr) != len(state.m):
        raise ShapeError("Adam state, parameters and gradients have different layouts")
    t = state.step + 1
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_arr, g_arr, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"parameter {p.shape} vs gradient {g.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(new_m, new_v, t, state.lr, state.beta1, state.beta2, state.eps)
    if hasattr(params, "with_arrays"):
        return params.with_arrays(new_p), new_state
    return new_p, new_state


# ---------------------------------------------------------------------------
# diagonal Gaussians


def clamp_log_std(log_std):
    return np.clip(np.asarray(log_std, dtype=np.float64), LOG_STD_MIN, LOG_STD_MAX)


def _check_lengths(mean, log_std, x=None):
    d = np.shape(log_std)[-1] if np.ndim(log_std) else None
    if np.ndim(log_std) != 1 or np.shape(mean)[-1] != d or (x is not None and np.shape(x) != np.shape(mean)):
        shapes = (np.shape(mean), np.shape(log_std)) + ((np.shape(x),) if x is not None else ())
        raise ShapeError(f"Gaussian argument shapes disagree: {shapes}")


def gaussian_log_prob(mean, log_std, x):
    """Log-density of a diagonal Gaussian, summed over the last axis."""
    mean = np.asarray(mean, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    _check_lengths(mean, log_std, x)
    ls = clamp_log_std(log_std)
    z = (x - mean) * np.exp(-ls)
    return np.sum(-0.5 * z * z - ls - HALF_LOG_2PI, axis=-1)


def gaussian_log_prob_grad(mean, log_std, x):
    """Gradients of ``gaussian_log_prob`` w.r.t. mean and (unclamped) log_std.

    The log_std gradient is zero wherever the clamp is active.
    """
    mean = np.asarray(mean, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    _check_lengths(mean, log_std, x)
    raw = np.asarray(log_std, dtype=np.float64)
    ls = clamp_log_std(raw)
    inv_var = np.exp(-2.0 * ls)
    diff = x - mean
    d_mean = diff * inv_var
    d_log_std = (diff * diff * inv_var - 1.0) * ((raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX))
    return d_mean, d_log_std


def gaussian_entropy(log_std) -> float:
    ls = clamp_log_std(log_std)
    return float(np.sum(ls + 0.5 + HALF_LOG_2PI))


def gaussian_sample(mean, log_std, rng: Rng):
    """Draw ``mean + exp(log_std) * eps``; returns ``(sample, log_prob)``."""
    mean = np.asarray(mean, dtype=np.float64)
    _check_lengths(mean, log_std)
    ls = clamp_log_std(log_std)
    sample = mean + np.exp(ls) * rng.normal(mean.shape)
    return sample, gaussian_log_prob(mean, ls, sample)
