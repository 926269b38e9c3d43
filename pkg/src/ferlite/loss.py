"""Label-smoothed, class-weighted categorical cross-entropy.

Targets are smoothed as y' = (1 - eps) * y + eps / K.  Per-class loss
multipliers follow the balanced form N / (K * n_c), clipped at a cap so
minority classes cannot produce extreme gradients.  The gradient of the
weighted loss with respect to logits is w * (softmax(z) - y'), which the
reference backend uses for analytic backprop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InvalidTargetError(ValueError):
    """smooth_labels requires an exact one-hot input vector."""


class EmptyClassError(ValueError):
    """Class weights are undefined for a class with zero samples."""


class ProbabilityDomainError(ValueError):
    """Cross-entropy requires strictly positive probabilities."""


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 0.06
    num_classes: int = 7

    def __post_init__(self) -> None:
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"epsilon must be in [0, 1), got {self.epsilon}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")


@dataclass(frozen=True)
class ClassWeights:
    weights: np.ndarray  # (K,) positive, each <= cap
    cap: float = 4.0

    def for_labels(self, labels: np.ndarray) -> np.ndarray:
        """Per-sample weight vector for a batch of label indices."""
        return self.weights[np.asarray(labels)]


def stable_softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax with max-subtraction, over the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def smooth_labels(one_hot: np.ndarray, epsilon: float, num_classes: int) -> np.ndarray:
    """y' = (1 - eps) * y + eps / K for a single one-hot vector."""
    one_hot = np.asarray(one_hot, dtype=np.float64)
    if one_hot.shape != (num_classes,):
        raise InvalidTargetError(f"expected shape ({num_classes},), got {one_hot.shape}")
    if not (np.count_nonzero(one_hot == 1.0) == 1 and np.count_nonzero(one_hot) == 1):
        raise InvalidTargetError("input is not a one-hot vector")
    return (1.0 - epsilon) * one_hot + epsilon / num_classes


def smooth_targets(labels: np.ndarray, epsilon: float, num_classes: int) -> np.ndarray:
    """Batched smoothed targets built directly from label indices."""
    labels = np.asarray(labels)
    targets = np.full((labels.size, num_classes), epsilon / num_classes)
    targets[np.arange(labels.size), labels] += 1.0 - epsilon
    return targets


def weighted_ce(probs: np.ndarray, target: np.ndarray, weight: float = 1.0) -> float:
    """-w * sum_k target_k * log(probs_k) for one prediction."""
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(probs <= 0.0):
        raise ProbabilityDomainError("probabilities must be strictly positive")
    if weight <= 0:
        raise ValueError(f"weight must be > 0, got {weight}")
    return float(-weight * np.sum(np.asarray(target) * np.log(probs)))


def ce_grad_logits(logits: np.ndarray, target: np.ndarray, weight: float = 1.0) -> np.ndarray:
    """Gradient of weighted_ce(softmax(logits), target, w) w.r.t. logits."""
    return weight * (stable_softmax(logits) - np.asarray(target, dtype=np.float64))


def compute_class_weights(counts: np.ndarray, cap: float = 4.0) -> ClassWeights:
    """Balanced weights w_c = min(cap, N / (K * n_c)).

    Raises EmptyClassError on any zero count; callers must merge or drop
    empty classes before weighting.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if cap <= 0:
        raise ValueError(f"cap must be > 0, got {cap}")
    if np.any(counts < 1):
        empty = np.nonzero(counts < 1)[0].tolist()
        raise EmptyClassError(f"classes with zero samples: {empty}")
    total = counts.sum()
    raw = total / (counts.size * counts)
    weights = np.minimum(raw, cap)
    weights.setflags(write=False)
    return ClassWeights(weights=weights, cap=cap)


def batch_loss(
    probs: np.ndarray,
    targets: np.ndarray,
    sample_weights: np.ndarray,
    *,
    normalize_by_weight_sum: bool = False,
) -> float:
    """Weight-carrying batch loss: sum_i w_i * CE_i over the chosen norm.

    Default normalization is the batch size; the alternative divides by
    the weight sum instead (config switch).
    """
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(probs <= 0.0):
        raise ProbabilityDomainError("probabilities must be strictly positive")
    per_sample = -np.sum(np.asarray(targets) * np.log(probs), axis=1)
    weighted = np.asarray(sample_weights, dtype=np.float64) * per_sample
    denom = float(np.sum(sample_weights)) if normalize_by_weight_sum else float(len(weighted))
    return float(weighted.sum() / denom)
