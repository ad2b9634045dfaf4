"""Small dense numeric kernel: affine maps, pooling, softmax, gradient checks, SGD.

Everything is float64. Arrays are plain numpy; ``LinearMap`` stores its weight
as ``(d_out, d_in)`` so that ``y = x @ weight.T + bias`` row-wise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np


class ShapeError(ValueError):
    """Raised when array dimensions do not line up."""


class ParameterError(ValueError):
    """Raised for invalid scalar parameters (temperature, epsilon, ...)."""


class NumericError(ArithmeticError):
    """Raised when a loss or update produces non-finite values."""


@dataclass
class LinearMap:
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or min(self.weight.shape) < 1:
            raise ShapeError(f"weight must be a non-empty matrix, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match d_out={self.weight.shape[0]}")

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator) -> "LinearMap":
        """Glorot-uniform weight, zero bias."""
        limit = np.sqrt(6.0 / (d_in + d_out))
        return cls(rng.uniform(-limit, limit, size=(d_out, d_in)), np.zeros(d_out))

    @classmethod
    def identity(cls, d: int, d_out: Optional[int] = None) -> "LinearMap":
        """Square identity, or for ``d_out != d`` the rectangular ``eye`` (leading inputs pass through)."""
        d_out = d if d_out is None else d_out
        return cls(np.eye(d_out, d), np.zeros(d_out))

    @classmethod
    def zeros(cls, d_in: int, d_out: int) -> "LinearMap":
        return cls(np.zeros((d_out, d_in)), np.zeros(d_out))

    def copy(self) -> "LinearMap":
        return LinearMap(self.weight.copy(), self.bias.copy())

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return linear_apply(x, self)


def linear_apply(x: np.ndarray, linear: LinearMap) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != linear.d_in:
        raise ShapeError(f"input shape {x.shape} incompatible with d_in={linear.d_in}")
    return x @ linear.weight.T + linear.bias


def linear_backward(x: np.ndarray, linear: LinearMap, grad_out: np.ndarray):
    """Return ``(grad_x, grad_weight, grad_bias)`` for ``y = linear(x)``."""
    grad_x = grad_out @ linear.weight
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


def mean_pool_spatial(a: np.ndarray) -> np.ndarray:
    """Average an ``(n, h, w, d)`` tensor over its spatial grid."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 4:
        raise ShapeError(f"expected (n, h, w, d) tensor, got shape {a.shape}")
    if a.shape[1] < 1 or a.shape[2] < 1:
        raise ShapeError(f"zero spatial extent in shape {a.shape}")
    return a.mean(axis=(1, 2))


def softmax_rows(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the (already temperature-scaled) logits."""
    inner = (grad_probs * probs).sum(axis=1, keepdims=True)
    return probs * (grad_probs - inner)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(logits)
    probs = softmax_rows(logits)
    picked = probs[np.arange(n), labels]
    loss = float(-np.log(np.maximum(picked, 1e-300)).mean())
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def finite_diff_check(
    loss_fn: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    epsilon: float = 1e-4,
    abs_floor: float = 1e-6,
) -> float:
    """Max relative error between ``analytic`` gradients and central differences.

    ``loss_fn`` is called with a dict of (perturbed) parameter arrays; the
    arrays in ``params`` are never modified.  The error for one entry is
    ``|analytic - numeric| / max(|analytic|, |numeric|, abs_floor)``, so
    gradients that are zero by construction (and whose central difference is
    pure rounding noise) are judged on an absolute scale.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ParameterError(f"epsilon {epsilon} outside [1e-6, 1e-3]")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    base = loss_fn(work)
    if not np.isfinite(base):
        raise NumericError(f"loss is not finite: {base}")
    worst = 0.0
    for name, arr in work.items():
        grad = np.asarray(analytic[name], dtype=np.float64)
        if grad.shape != arr.shape:
            raise ShapeError(f"gradient for {name!r} has shape {grad.shape}, expected {arr.shape}")
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_fn(work)
            flat[i] = orig - epsilon
            down = loss_fn(work)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"loss not finite while perturbing {name}[{i}]")
            numeric = (up - down) / (2.0 * epsilon)
            denom = max(abs(gflat[i]), abs(numeric), abs_floor)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst


@dataclass
class OptimState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0004
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> Dict[str, np.ndarray]:
    """Scale all gradients together so their joint L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ParameterError(f"max_norm must be positive, got {max_norm}")
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if total <= max_norm:
        return dict(grads)
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


def sgd_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimState,
) -> Tuple[Dict[str, np.ndarray], OptimState]:
    """Momentum SGD with L2 weight decay folded into the velocity.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    Returns new parameter and state objects; inputs are left untouched.
    """
    new_params: Dict[str, np.ndarray] = {}
    new_velocity: Dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"grad {name!r} shape {g.shape} != param shape {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ShapeError(f"velocity {name!r} shape {v.shape} != param shape {p.shape}")
        v = state.momentum * v + g + state.weight_decay * p
        new_velocity[name] = v
        new_params[name] = p - state.learning_rate * v
    new_state = OptimState(state.learning_rate, state.momentum, state.weight_decay, new_velocity)
    return new_params, new_state
