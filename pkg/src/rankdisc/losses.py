"""Loss terms of the joint objective and the consistency ramp-up.

Each loss has a value function and a gradient function. Gradients are
taken with respect to the softmax probabilities, except for cross-entropy
whose gradient is returned directly with respect to the logits.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

EPS = 1e-12


class NumericError(ArithmeticError):
    pass


def _check_labels(labels, n_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    return labels


def cross_entropy(probs: np.ndarray, labels) -> float:
    """Mean negative log-probability of the true class, clamped at ``EPS``."""
    labels = _check_labels(labels, probs.shape[1])
    picked = probs[np.arange(probs.shape[0]), labels]
    return float(-np.mean(np.log(np.clip(picked, EPS, 1.0))))


def cross_entropy_grad_logits(probs: np.ndarray, labels) -> np.ndarray:
    """Gradient of :func:`cross_entropy` w.r.t. the pre-softmax logits.

    Uses the fused form ``(p - onehot) / B``, exact wherever the clamp is
    inactive; inside the clamp it keeps pushing instead of going flat.
    """
    labels = _check_labels(labels, probs.shape[1])
    grad = probs.copy()
    grad[np.arange(probs.shape[0]), labels] -= 1.0
    return grad / probs.shape[0]


def _pair_weights(b: int, include_diagonal: bool):
    mask = np.ones((b, b))
    if not include_diagonal:
        np.fill_diagonal(mask, 0.0)
    count = mask.sum()
    return mask, (count if count else 1.0)


def _check_pairs(probs, s):
    s = np.asarray(s)
    b = probs.shape[0]
    if s.shape != (b, b):
        raise ValueError(f"pair-label matrix shape {s.shape} does not match batch size {b}")
    return s


def pairwise_bce(probs: np.ndarray, s, include_diagonal: bool = True) -> float:
    """Binary cross-entropy between pair labels and inner products ``p_i . p_j``."""
    s = _check_pairs(probs, s)
    mask, count = _pair_weights(probs.shape[0], include_diagonal)
    sim = np.clip(probs @ probs.T, EPS, 1.0 - EPS)
    terms = s * np.log(sim) + (1 - s) * np.log(1.0 - sim)
    return float(-(terms * mask).sum() / count)


def pairwise_bce_grad(probs: np.ndarray, s, include_diagonal: bool = True) -> np.ndarray:
    """Gradient of :func:`pairwise_bce` w.r.t. ``probs``.

    The derivative is evaluated at the clamped similarity, so saturated
    pairs still contribute a finite push.
    """
    s = _check_pairs(probs, s)
    mask, count = _pair_weights(probs.shape[0], include_diagonal)
    sim = np.clip(probs @ probs.T, EPS, 1.0 - EPS)
    g = -(s / sim - (1 - s) / (1.0 - sim)) * mask / count
    return (g + g.T) @ probs


def consistency_mse(probs_clean: np.ndarray, probs_aug: np.ndarray) -> float:
    """Mean over samples of the squared L2 distance between two predictions."""
    if probs_clean.shape != probs_aug.shape:
        raise ValueError(f"shape mismatch: {probs_clean.shape} vs {probs_aug.shape}")
    diff = probs_clean - probs_aug
    return float((diff * diff).sum() / probs_clean.shape[0])


def consistency_mse_grad(probs_clean: np.ndarray, probs_aug: np.ndarray):
    g = 2.0 * (probs_clean - probs_aug) / probs_clean.shape[0]
    return g, -g


@dataclass(frozen=True)
class RampUpSchedule:
    lam: float = 5.0
    length: int = 10

    def __post_init__(self):
        if self.lam < 0 or self.length < 1:
            raise ValueError("ramp-up needs lambda >= 0 and a positive length")

    def __call__(self, t) -> float:
        return ramp_up(self, t)

    def shape(self, t) -> float:
        """The schedule's profile normalised to end at 1."""
        if t >= self.length:
            return 1.0
        return math.exp(-5.0 * (1.0 - t / self.length) ** 2)


def ramp_up(sched: RampUpSchedule, t) -> float:
    """``lam * exp(-5 (1 - t/T)^2)`` for ``t < T``, then ``lam``."""
    if t < 0:
        raise ValueError(f"t must be nonnegative, got {t}")
    return sched.lam * sched.shape(t)


@dataclass(frozen=True)
class LossReport:
    ce: float
    bce: float
    mse: float
    omega: float
    total: float

    def as_dict(self):
        return asdict(self)


def total_loss(ce: float, bce: float, mse: float, omega: float) -> LossReport:
    for name, value in (("ce", ce), ("bce", bce), ("mse", mse), ("omega", omega)):
        if not math.isfinite(value):
            raise NumericError(f"loss component {name} is not finite: {value}")
    return LossReport(ce, bce, mse, omega, ce + bce + omega * mse)
