"""Threshold-free evaluation of confidence scores.

Convention everywhere: in-distribution examples are the positives and carry
higher confidence scores; out-of-distribution examples are the negatives.
All three metrics are rank statistics, invariant under any strictly
increasing transform applied to all scores jointly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ValidationDataError
from .losses import softmax


@dataclass(frozen=True)
class ScoreSample:
    """Confidence scores for the two test populations."""

    in_scores: np.ndarray
    out_scores: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "in_scores",
                           np.asarray(self.in_scores, dtype=np.float64).ravel())
        object.__setattr__(self, "out_scores",
                           np.asarray(self.out_scores, dtype=np.float64).ravel())
        if len(self.in_scores) == 0 or len(self.out_scores) == 0:
            raise ValidationDataError("both score lists must be non-empty")
        if not (np.all(np.isfinite(self.in_scores))
                and np.all(np.isfinite(self.out_scores))):
            raise ValidationDataError("scores must be finite")


@dataclass(frozen=True)
class EvalResult:
    tnr95: float
    auroc: float
    dacc: float

    def as_dict(self):
        return {"tnr95": self.tnr95, "auroc": self.auroc, "dacc": self.dacc}


def msp_score(logits: np.ndarray) -> np.ndarray | float:
    """Maximum softmax probability; scalar for one logit vector, else per row."""
    logits = np.asarray(logits, dtype=np.float64)
    probs = softmax(logits)
    top = probs.max(axis=-1)
    return float(top) if logits.ndim == 1 else top


def tnr_at_tpr(sample: ScoreSample, tpr_target: float = 0.95) -> float:
    """True-negative rate at the largest observed threshold keeping TPR >= target.

    The threshold tau is the largest in-score value with
    #{in >= tau}/|in| >= tpr_target; the return value is #{out < tau}/|out|.
    """
    in_sorted = np.sort(sample.in_scores)[::-1]
    n_in = len(in_sorted)
    # k-th largest in-score admits at least k positives at threshold tau.
    k = int(np.ceil(tpr_target * n_in))
    k = min(max(k, 1), n_in)
    tau = in_sorted[k - 1]
    return float(np.mean(sample.out_scores < tau))


def auroc(sample: ScoreSample) -> float:
    """Probability a random positive outscores a random negative, ties half-counted.

    Computed via the rank-sum identity, which equals exhaustive pair counting
    with 0.5 per tied pair.
    """
    n_in = len(sample.in_scores)
    n_out = len(sample.out_scores)
    ranks = rankdata(np.concatenate([sample.in_scores, sample.out_scores]),
                     method="average")
    rank_sum = float(ranks[:n_in].sum())
    u = rank_sum - n_in * (n_in + 1) / 2.0
    return u / (n_in * n_out)


def detection_accuracy(sample: ScoreSample) -> float:
    """Best balanced accuracy over all thresholds with equal class priors.

    A score q is classified out-of-distribution when q <= threshold, so
    DAcc(eps) = 0.5 * (P_in(q > eps) + P_out(q <= eps)), maximized over all
    observed score values plus the two infinite sentinels.
    """
    n_in = len(sample.in_scores)
    n_out = len(sample.out_scores)
    in_sorted = np.sort(sample.in_scores)
    out_sorted = np.sort(sample.out_scores)
    candidates = np.concatenate([[-np.inf], in_sorted, out_sorted, [np.inf]])
    tpr = 1.0 - np.searchsorted(in_sorted, candidates, side="right") / n_in
    tnr = np.searchsorted(out_sorted, candidates, side="right") / n_out
    return float(np.max(0.5 * (tpr + tnr)))


def evaluate_sample(sample: ScoreSample) -> EvalResult:
    return EvalResult(tnr95=tnr_at_tpr(sample), auroc=auroc(sample),
                      dacc=detection_accuracy(sample))
