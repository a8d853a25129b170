"""Re-weighted cross-entropy, Outlier Exposure terms, and the lambda schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "ClassWeights",
    "LambdaSchedule",
    "LossError",
    "LossValue",
    "class_weights",
    "combined_objective",
    "importance_estimate",
    "lambda_value",
    "oe_labeled_loss",
    "oe_uniform_loss",
    "weighted_cross_entropy",
]


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class ClassWeights:
    weights: tuple[float, ...]
    source: Literal["formula", "manual"] = "manual"
    class_counts: tuple[int, ...] | None = None
    total: int | None = None

    def __post_init__(self):
        if len(self.weights) < 2:
            raise LossError("need at least two class weights")
        if any(not (w > 0 and math.isfinite(w)) for w in self.weights):
            raise LossError(f"class weights must be finite and positive, got {self.weights}")

    @classmethod
    def uniform(cls, num_classes: int) -> "ClassWeights":
        return cls(tuple([1.0] * num_classes))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=np.float64)


def class_weights(class_counts=None, mode: str = "formula", manual: Sequence[float] | None = None) -> ClassWeights:
    """Per-class loss weights.

    ``formula`` gives ``n / (K * count_i)``; ``rescaled`` divides those by the
    first weight so ``w_0 == 1``; ``manual`` validates and passes ``manual`` through.
    """
    if mode == "manual":
        if manual is None:
            raise LossError("manual mode needs explicit weights")
        return ClassWeights(tuple(float(w) for w in manual), "manual")
    if mode not in ("formula", "rescaled"):
        raise LossError(f"unknown class-weight mode {mode!r}")
    counts = [int(c) for c in class_counts]
    if len(counts) < 2:
        raise LossError("need counts for at least two classes")
    for i, c in enumerate(counts):
        if c <= 0:
            raise LossError(f"class {i} has count {c}; formula weights need every count > 0")
    n, k = sum(counts), len(counts)
    weights = [n / (k * c) for c in counts]
    if mode == "rescaled":
        w0 = weights[0]
        weights = [w / w0 for w in weights]
        weights[0] = 1.0
    return ClassWeights(tuple(weights), mode, tuple(counts), n)


def _check_labels(log_probs: Tensor, labels) -> np.ndarray:
    if log_probs.data.ndim != 2 or log_probs.shape[0] == 0:
        raise LossError(f"expected a non-empty (N, K) batch of log-probabilities, got {log_probs.shape}")
    labels = np.asarray(labels)
    if labels.shape != (log_probs.shape[0],):
        raise LossError(f"labels shape {labels.shape} does not match batch size {log_probs.shape[0]}")
    k = log_probs.shape[1]
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        raise LossError(f"label {labels[bad[0]]} at index {bad[0]} is outside [0, {k})")
    return labels.astype(np.int64)


def weighted_cross_entropy(log_probs: Tensor, labels, weights: ClassWeights | None = None) -> Tensor:
    """``-(1/n) * sum_j w[y_j] * log p(y_j | x_j)`` as a differentiable scalar."""
    labels = _check_labels(log_probs, labels)
    n, k = log_probs.shape
    w = np.ones(k) if weights is None else weights.as_array()
    if w.shape != (k,):
        raise LossError(f"{w.size} class weights for {k} classes")
    coeffs = np.zeros((n, k))
    coeffs[np.arange(n), labels] = -w[labels] / n
    return ad.weighted_sum(log_probs, coeffs)


def oe_uniform_loss(log_probs_oe: Tensor) -> Tensor:
    """Cross-entropy from the predictions to the uniform distribution over K classes."""
    if log_probs_oe.data.ndim != 2 or log_probs_oe.shape[0] == 0:
        raise LossError(f"expected a non-empty (N, K) batch, got {log_probs_oe.shape}")
    n, k = log_probs_oe.shape
    return ad.weighted_sum(log_probs_oe, np.full((n, k), -1.0 / (n * k)))


def oe_labeled_loss(log_probs_oe: Tensor, labels_oe, weights: ClassWeights | None = None) -> Tensor:
    if labels_oe is None or any(lbl is None for lbl in np.atleast_1d(np.asarray(labels_oe, dtype=object))):
        raise LossError("labeled OE loss needs a label for every outlier sample; use oe_uniform_loss for unlabeled outliers")
    return weighted_cross_entropy(log_probs_oe, np.asarray(labels_oe, dtype=np.int64), weights)


@dataclass(frozen=True)
class LambdaSchedule:
    mode: Literal["fixed", "kl_static", "kl_epoch"] = "fixed"
    fixed_value: float = 0.5
    d_kl: float = 0.0
    total_epochs: int = 20
    kl_scope: Literal["full_distribution", "per_batch"] = "full_distribution"

    def __post_init__(self):
        if self.mode not in ("fixed", "kl_static", "kl_epoch"):
            raise LossError(f"unknown lambda mode {self.mode!r}")
        if self.kl_scope not in ("full_distribution", "per_batch"):
            raise LossError(f"unknown kl_scope {self.kl_scope!r}")
        if self.fixed_value < 0:
            raise LossError("fixed lambda must be non-negative")
        if self.d_kl < 0:
            raise LossError("d_kl must be non-negative")
        if self.total_epochs < 1:
            raise LossError("total_epochs must be positive")


def lambda_value(schedule: LambdaSchedule, epoch: int = 0, d_kl: float | None = None) -> float:
    """OE weight at the start of ``epoch`` (0-based).

    ``d_kl`` overrides ``schedule.d_kl``; the per-batch scope passes the batch pair's value.
    """
    if epoch < 0 or epoch > schedule.total_epochs:
        raise LossError(f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    if schedule.mode == "fixed":
        return schedule.fixed_value
    d = schedule.d_kl if d_kl is None else d_kl
    if d < 0:
        raise LossError("d_kl must be non-negative")
    base = math.tanh(d)
    if schedule.mode == "kl_static":
        return base
    return base * (1.0 - math.cos(epoch * math.pi / schedule.total_epochs))


@dataclass
class LossValue:
    total: float
    in_dist_term: float
    oe_term: float
    lambda_used: float
    tensor: Tensor | None = field(default=None, repr=False, compare=False)


def _value(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def combined_objective(in_loss, oe_loss, schedule: LambdaSchedule, epoch: int = 0, d_kl: float | None = None) -> LossValue:
    """``in_loss + lambda(epoch) * oe_loss``.

    Tensor inputs produce a differentiable ``LossValue.tensor`` for ``backward``.
    """
    lam = lambda_value(schedule, epoch, d_kl)
    in_v, oe_v = _value(in_loss), _value(oe_loss)
    if in_v < 0 or oe_v < 0:
        raise LossError(f"cross-entropy terms must be non-negative, got in={in_v} oe={oe_v}")
    tensor = None
    if isinstance(in_loss, Tensor):
        tensor = ad.add(in_loss, ad.scale(oe_loss, lam)) if isinstance(oe_loss, Tensor) else in_loss
        total = tensor.item()
    else:
        total = in_v + lam * oe_v
    return LossValue(total, in_v, oe_v, lam, tensor)


def importance_estimate(samples, ratio: Callable | Sequence[float], f: Callable | Sequence[float]) -> float:
    """``(1/n) * sum Q(x)/P(x) * f(x)`` over ``samples`` drawn from P.

    ``ratio`` and ``f`` are either callables or arrays aligned with ``samples``.
    A ratio of ``inf``/``nan`` means P(x) = 0 at an observed sample.
    """
    xs = list(samples)
    if not xs:
        raise LossError("importance estimate needs at least one sample")
    r = np.asarray([ratio(x) for x in xs] if callable(ratio) else ratio, dtype=np.float64)
    fx = np.asarray([f(x) for x in xs] if callable(f) else f, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise LossError("likelihood ratio undefined: P(x) = 0 for an observed sample")
    if np.any(r < 0):
        raise LossError("likelihood ratio must be non-negative")
    return float(np.mean(r * fx))


def exhaustive_importance_estimate(p: Sequence[float], q: Sequence[float], f: Sequence[float]) -> float:
    """Importance estimate over every support point of P, each weighted by P(x).

    Enumerating a finite P exactly, ``sum_x P(x) * Q(x)/P(x) * f(x)`` is the
    expectation under Q; points where ``P(x) = 0`` are never sampled.
    """
    p, q, f = (np.asarray(a, dtype=np.float64) for a in (p, q, f))
    if not (p.shape == q.shape == f.shape):
        raise LossError("p, q and f must share one support")
    support = p > 0
    if np.any(q[~support] > 0):
        raise LossError("Q puts mass where P has none; the identity needs P to cover Q's support")
    ratio = q[support] / p[support]
    return float(np.sum(p[support] * ratio * f[support]))
