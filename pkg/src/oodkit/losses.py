"""Softmax, cross-entropy, and the three-term fine-tuning objective.

Every loss returns (value, gradient-with-respect-to-logits) so the network
module never needs to know the loss algebra. The combined objective is

    ce + lam1 * (a_tr - mean max softmax)^2 + lam2 * mean_oe sum_l |1/K - p_l|

where the first two terms run over the in-distribution batch and the last
over the outlier-exposure batch. The l1 term is averaged over the OE batch
so lam2 keeps its meaning across batch sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError, LabelError


@dataclass(frozen=True)
class OeccConfig:
    """Weights for the two regularizers plus the frozen training accuracy."""

    lam1: float
    lam2: float
    a_tr: float

    def __post_init__(self):
        if self.lam1 < 0 or self.lam2 < 0:
            raise ValueError(f"lambdas must be nonnegative: {self.lam1}, {self.lam2}")
        if not 0.0 <= self.a_tr <= 1.0:
            raise ValueError(f"a_tr must be in [0, 1], got {self.a_tr}")


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction for overflow safety."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_batch(logits: np.ndarray, name: str) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise InsufficientDataError(f"{name} must be a (batch, K) array, got {logits.shape}")
    if logits.shape[0] == 0:
        raise InsufficientDataError(f"{name} is empty")
    return logits


def ce_loss(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its logit gradient."""
    logits = _check_batch(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise LabelError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise LabelError(f"label {bad} outside [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    value = -float(log_probs[np.arange(n), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return value, grad


def confidence_term(logits: np.ndarray, a_tr: float) -> tuple[float, np.ndarray]:
    """Squared gap between a_tr and the batch-mean max softmax probability.

    The gradient flows through the batch mean, so the square couples all
    examples. Ties in the max are broken toward the lowest class index.
    """
    logits = _check_batch(logits, "logits")
    n = logits.shape[0]
    probs = softmax(logits)
    top = np.argmax(probs, axis=1)
    max_probs = probs[np.arange(n), top]
    gap = a_tr - float(max_probs.mean())
    value = gap * gap
    # d value / d z_ij = 2*gap * (-1/n) * p_top * (delta(j=top) - p_ij)
    coef = -2.0 * gap / n
    grad = probs * (-max_probs[:, None])
    grad[np.arange(n), top] += max_probs
    grad *= coef
    return value, grad


def uniformity_term(logits: np.ndarray) -> tuple[float, np.ndarray]:
    """l1 distance of each softmax output from the uniform distribution.

    Returns the sum over the batch; callers decide the normalization.
    Subgradient at |0| kinks is 0 via the sign convention.
    """
    logits = _check_batch(logits, "logits")
    k = logits.shape[1]
    probs = softmax(logits)
    dev = probs - 1.0 / k
    value = float(np.abs(dev).sum())
    signs = np.sign(dev)
    grad = probs * (signs - (signs * probs).sum(axis=1, keepdims=True))
    return value, grad


def oecc_loss(in_logits, labels, oe_logits, cfg: OeccConfig):
    """Assemble the full objective on an (in-batch, OE-batch) pair.

    Returns (value, grad_in, grad_oe); grad_oe is None when no OE batch was
    supplied. Terms whose lambda is exactly 0 are skipped entirely so the
    degenerate objective is bit-identical to plain cross-entropy.
    """
    value, grad_in = ce_loss(in_logits, labels)
    if cfg.lam1 > 0.0:
        conf_value, conf_grad = confidence_term(in_logits, cfg.a_tr)
        value = value + cfg.lam1 * conf_value
        grad_in = grad_in + cfg.lam1 * conf_grad
    grad_oe = None
    if oe_logits is not None:
        oe_logits = np.asarray(oe_logits, dtype=np.float64)
        grad_oe = np.zeros_like(oe_logits)
        if cfg.lam2 > 0.0:
            uni_value, uni_grad = uniformity_term(oe_logits)
            scale = cfg.lam2 / oe_logits.shape[0]
            value = value + scale * uni_value
            grad_oe = scale * uni_grad
    elif cfg.lam2 > 0.0:
        raise InsufficientDataError("lam2 > 0 requires an OE batch")
    return value, grad_in, grad_oe
