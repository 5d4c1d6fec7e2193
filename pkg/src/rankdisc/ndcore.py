"""Dense float64 tensor primitives with explicit backward passes.

Tensors are plain C-contiguous ``numpy.ndarray`` objects of dtype float64.
Every differentiable op comes as a ``forward``/``backward`` pair; there is
no autodiff graph. Layers cache what their backward pass needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible."""


def tensor(data) -> np.ndarray:
    """Coerce ``data`` to a C-contiguous float64 array."""
    return np.ascontiguousarray(data, dtype=DTYPE)


@dataclass(eq=False)
class Parameter:
    """A trainable tensor with its gradient and momentum buffer."""

    value: np.ndarray
    frozen: bool = False
    grad: np.ndarray = field(default=None, repr=False)
    velocity: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = tensor(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.velocity is None:
            self.velocity = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(
                f"gradient shape {self.grad.shape} != value shape {self.value.shape}"
            )

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def matmul_backward(a: np.ndarray, b: np.ndarray, grad_out: np.ndarray):
    """Return ``(dL/da, dL/db)`` for ``out = a @ b``."""
    return grad_out @ b.T, a.T @ grad_out


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, shifted by the row max for stability."""
    logits = np.asarray(logits, dtype=DTYPE)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of softmax: ``p * (g - <g, p>)`` row-wise."""
    inner = (grad_probs * probs).sum(axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return grad_out * (x > 0.0)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear:
    """Affine map ``x @ W + b`` over a batch of row vectors."""

    def __init__(self, weight: Parameter, bias: Parameter):
        if weight.value.ndim != 2 or bias.value.shape != (weight.value.shape[1],):
            raise DimensionError(
                f"bias shape {bias.value.shape} does not fit weight {weight.value.shape}"
            )
        self.weight = weight
        self.bias = bias
        self._x = None

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int) -> "Linear":
        return cls(Parameter(glorot_uniform(rng, n_in, n_out)), Parameter(np.zeros(n_out)))

    @property
    def n_in(self) -> int:
        return self.weight.value.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.value.shape[1]

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        if cache:
            self._x = x
        return matmul(x, self.weight.value) + self.bias.value

    def backward(self, grad_out: np.ndarray, need_input_grad: bool = True):
        """Accumulate parameter gradients and return ``dL/dx`` (or None)."""
        x = self._x
        if x is None:
            raise RuntimeError("backward called before forward")
        if not self.weight.frozen:
            self.weight.grad += x.T @ grad_out
        if not self.bias.frozen:
            self.bias.grad += grad_out.sum(axis=0)
        if need_input_grad:
            return grad_out @ self.weight.value.T
        return None


def sgd_step(params, lr: float, momentum: float = 0.0):
    """Momentum SGD: ``v <- m*v + g``; ``w <- w - lr*v``; then zero all grads.

    Frozen parameters keep their value and velocity untouched.
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    for p in params:
        if not p.frozen:
            p.velocity *= momentum
            p.velocity += p.grad
            p.value -= lr * p.velocity
        p.zero_grad()
