"""Desk-scale out-of-distribution detection toolkit.

Train a small softmax classifier, optionally fine-tune it against auxiliary
outliers with a confidence-control objective, attach post-training detectors
(Mahalanobis distances, Gram-matrix correlation ranges), and evaluate
detector quality with threshold-free metrics. Everything is seeded and
reproducible bit for bit.
"""

from . import (
    cli,
    data,
    errors,
    gram,
    harness,
    linalg,
    losses,
    mahalanobis,
    metrics,
    nn,
    synthgen,
    toydata,
)

__all__ = [
    "cli",
    "data",
    "errors",
    "gram",
    "harness",
    "linalg",
    "losses",
    "mahalanobis",
    "metrics",
    "nn",
    "synthgen",
    "toydata",
]

__version__ = "0.1.0"
