"""Dense-network substrate: layers, activations, initializers, Adam, RNG,
and a finite-difference gradient oracle.

Everything here operates on plain numpy arrays.  Training code uses float32
storage; gradient-check paths build float64 models because central
differences are unreliable in single precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DimensionError, NumericalError


class Activation(str, Enum):
    SINE = "sine"
    RELU = "relu"
    IDENTITY = "identity"


@dataclass
class DenseLayer:
    """One affine map with an activation tag.  weights is (out_dim, in_dim)."""

    weights: np.ndarray
    bias: np.ndarray
    activation: Activation

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise DimensionError(
                f"weights must be 2-d and bias 1-d, got {self.weights.ndim}-d and {self.bias.ndim}-d"
            )
        if self.weights.shape[0] != self.bias.shape[0]:
            raise DimensionError(
                f"weights have {self.weights.shape[0]} rows but bias has length {self.bias.shape[0]}"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


def linear_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    """Pre-activation weights @ x + bias.  x is (in_dim,) or (B, in_dim)."""
    if x.shape[-1] != layer.in_dim:
        raise DimensionError(
            f"layer expects in_dim={layer.in_dim}, input has dim={x.shape[-1]}"
        )
    return x @ layer.weights.T + layer.bias


def activate(v: np.ndarray, kind: Activation) -> np.ndarray:
    if kind == Activation.SINE:
        return np.sin(v)
    if kind == Activation.RELU:
        return np.maximum(v, 0.0)
    return v


def activate_backward(v: np.ndarray, kind: Activation, upstream: np.ndarray) -> np.ndarray:
    """upstream * d(activate)/dv, evaluated elementwise at pre-activation v."""
    if v.shape != upstream.shape:
        raise DimensionError(
            f"pre-activation shape {v.shape} does not match upstream shape {upstream.shape}"
        )
    if kind == Activation.SINE:
        return upstream * np.cos(v)
    if kind == Activation.RELU:
        return upstream * (v > 0)
    return upstream


# ---------------------------------------------------------------------------
# Seeded RNG: counter-based splitmix64.
#
# output(k) = mix64(seed + (k+1) * GAMMA), all arithmetic mod 2^64.
# mix64 is the splitmix64 finalizer (Steele/Lea/Flood; Vigna's constants):
#   z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
#   z ^= z >> 27; z *= 0x94D049BB133111EB
#   z ^= z >> 31
# Pure integer ops make streams bit-identical across platforms.  Full
# constants and the float mappings are documented in the README.
# ---------------------------------------------------------------------------

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class RngStream:
    """Deterministic counter-based generator over a 64-bit seed."""

    def __init__(self, seed: int):
        self.seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0

    def raw(self, count: int) -> np.ndarray:
        """Next `count` raw uint64 outputs."""
        idx = np.arange(self._counter + 1, self._counter + count + 1, dtype=np.uint64)
        self._counter += count
        with np.errstate(over="ignore"):
            return _mix64(self.seed + idx * _GAMMA)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform draws in [low, high); 53-bit mantissa resolution."""
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        out = low + u * (high - low)
        return out.reshape(shape) if shape else float(out[0])

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Gaussian draws via Box-Muller on consecutive uniform pairs."""
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        pairs = (n + 1) // 2
        u = (self.raw(2 * pairs) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u1, u2 = u[:pairs], u[pairs:]
        r = np.sqrt(-2.0 * np.log1p(-u1))  # 1-u1 in (0,1], log never hits 0
        theta = 2.0 * np.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        out = mean + std * out
        return out.reshape(shape) if shape else float(out[0])

    def integers(self, n: int, shape=()) -> np.ndarray:
        """Uniform integers in [0, n).  Fine for n << 2^53."""
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self.raw(size) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        out = np.minimum((u * n).astype(np.int64), n - 1)
        return out.reshape(shape) if shape else int(out[0])

    def spawn(self, key: int) -> "RngStream":
        """Independent child stream; child seed = mix64(seed + (key+1)*GAMMA)."""
        with np.errstate(over="ignore"):
            child = _mix64(self.seed + np.uint64(key + 1) * _GAMMA)
        return RngStream(int(child))


# ---------------------------------------------------------------------------
# Initializers
# ---------------------------------------------------------------------------


def init_siren_first(out_dim: int, in_dim: int, rng: RngStream,
                     omega0: float = 30.0, dtype=np.float32) -> DenseLayer:
    """First sine layer: Uniform(-1/in_dim, 1/in_dim) scaled by omega0, zero bias.

    The frequency scale is folded into the weights at init, so nothing else
    in the network carries an extra multiplier.
    """
    bound = 1.0 / in_dim
    w = rng.uniform((out_dim, in_dim), -bound, bound) * omega0
    return DenseLayer(w.astype(dtype), np.zeros(out_dim, dtype=dtype), Activation.SINE)


def init_siren_hidden(out_dim: int, in_dim: int, omega0: float,
                      rng: RngStream, dtype=np.float32) -> DenseLayer:
    """Hidden sine layer: Uniform(+-sqrt(6/in_dim)/omega0), zero bias."""
    bound = math.sqrt(6.0 / in_dim) / omega0
    w = rng.uniform((out_dim, in_dim), -bound, bound)
    return DenseLayer(w.astype(dtype), np.zeros(out_dim, dtype=dtype), Activation.SINE)


def init_relu_layer(out_dim: int, in_dim: int, rng: RngStream,
                    activation: Activation = Activation.RELU,
                    dtype=np.float32) -> DenseLayer:
    """Kaiming-style Uniform(+-sqrt(6/in_dim)), zero bias."""
    bound = math.sqrt(6.0 / in_dim)
    w = rng.uniform((out_dim, in_dim), -bound, bound)
    return DenseLayer(w.astype(dtype), np.zeros(out_dim, dtype=dtype), activation)


# ---------------------------------------------------------------------------
# Plain MLP forward/backward (used by the tile encoder)
# ---------------------------------------------------------------------------


@dataclass
class MlpTape:
    pres: list    # pre-activations per layer, each (B, out)
    posts: list   # layer inputs: posts[i] feeds layer i; posts[-1] is the output


def mlp_forward(layers: list[DenseLayer], x: np.ndarray):
    """Run a plain feed-forward stack.  x is (B, in_dim)."""
    pres, posts = [], [x]
    h = x
    for ly in layers:
        p = linear_forward(ly, h)
        h = activate(p, ly.activation)
        pres.append(p)
        posts.append(h)
    return h, MlpTape(pres, posts)


def mlp_backward(layers: list[DenseLayer], tape: MlpTape, upstream: np.ndarray):
    """Gradients of all layers plus the input, for a batch-summed loss."""
    grads = [None] * len(layers)
    d = upstream
    for i in reversed(range(len(layers))):
        dpre = activate_backward(tape.pres[i], layers[i].activation, d)
        x_in = tape.posts[i]
        grads[i] = (dpre.T @ x_in, dpre.sum(axis=0))
        d = dpre @ layers[i].weights
    return grads, d


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected Adam.  Entries whose gradient is exactly zero are left
    untouched (parameters and moments), so codebook rows outside a minibatch
    never drift."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    first_moment: np.ndarray | None = None
    second_moment: np.ndarray | None = None
    step_count: int = 0


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState):
    """One update.  Returns (new_params, state); state is advanced in place."""
    if params.shape != grads.shape:
        raise DimensionError(
            f"params shape {params.shape} does not match grads shape {grads.shape}"
        )
    if state.first_moment is None:
        state.first_moment = np.zeros_like(params)
        state.second_moment = np.zeros_like(params)
    if state.first_moment.shape != params.shape:
        raise DimensionError(
            f"moment shape {state.first_moment.shape} does not match params shape {params.shape}"
        )
    state.step_count += 1
    t = state.step_count
    active = grads != 0
    m = np.where(active, state.beta1 * state.first_moment + (1 - state.beta1) * grads,
                 state.first_moment)
    v = np.where(active, state.beta2 * state.second_moment + (1 - state.beta2) * grads * grads,
                 state.second_moment)
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    delta = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    new_params = np.where(active, params - delta, params)
    state.first_moment = m
    state.second_moment = v
    return new_params.astype(params.dtype, copy=False), state


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def finite_difference_grad(f, params: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences (f(p+eps*e_k) - f(p-eps*e_k)) / (2*eps), in float64."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = np.asarray(params, dtype=np.float64).ravel().copy()
    grad = np.zeros_like(p)
    for k in range(p.size):
        orig = p[k]
        p[k] = orig + eps
        fp = float(f(p))
        p[k] = orig - eps
        fm = float(f(p))
        p[k] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericalError(f"non-finite evaluation while differencing coordinate {k}")
        grad[k] = (fp - fm) / (2.0 * eps)
    return grad.reshape(np.shape(params))
