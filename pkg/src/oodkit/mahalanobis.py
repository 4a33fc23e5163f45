"""Mahalanobis-distance confidence scoring over captured layer features.

Fits one class-conditional Gaussian per capture layer (per-class means, one
tied covariance), scores a sample by the negative squared Mahalanobis
distance to the closest class, optionally nudges the input along the score
gradient, and combines the per-layer scores with a logistic-regression
weighting fitted on validation data. Conv feature maps are reduced to
channel vectors by spatial averaging before fitting.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .errors import DetectorStateError, FormatError, ShapeError, ValidationDataError
from .linalg import (
    SpdFactor,
    class_stats,
    default_ridge,
    load_tensor,
    save_tensor,
    spd_factor,
    spd_solve,
)


@dataclass(frozen=True)
class MahalanobisState:
    """Fitted per-layer Gaussians plus the optional layer combiner."""

    means: list[np.ndarray]          # per capture layer: (K, d_l)
    factors: list[SpdFactor]         # per capture layer
    num_classes: int
    weights: np.ndarray | None = None
    bias: float | None = None
    preproc_eps: float = 0.0

    @property
    def num_layers(self) -> int:
        return len(self.means)

    @property
    def fitted(self) -> bool:
        return self.weights is not None


def pooled_features(trace: nn.ForwardTrace) -> list[np.ndarray]:
    """Capture features as (N, d) matrices; conv maps are spatially averaged."""
    return [f.mean(axis=(2, 3)) if f.ndim == 4 else f for f in trace.features]


def fit(net: nn.Network, images: np.ndarray, labels: np.ndarray,
        chunk: int = 256) -> MahalanobisState:
    """Fit per-layer class means and tied covariances on labeled training data.

    The returned state has no combiner and preproc_eps 0; covariances are
    factored with the default ridge so rank-deficient desk-scale features
    still solve.
    """
    labels = np.asarray(labels, dtype=np.int64)
    per_layer: list[list[np.ndarray]] = [[] for _ in range(net.num_captures)]
    for start in range(0, len(images), chunk):
        trace = nn.forward(net, images[start:start + chunk])
        for l, feats in enumerate(pooled_features(trace)):
            per_layer[l].append(feats)
    means, factors = [], []
    for feats_parts in per_layer:
        feats = np.concatenate(feats_parts, axis=0)
        mu, cov = class_stats(feats, labels, net.num_classes)
        means.append(mu)
        factors.append(spd_factor(cov, default_ridge(cov)))
    return MahalanobisState(means=means, factors=factors,
                            num_classes=net.num_classes)


def _layer_score_matrix(state: MahalanobisState, feats: list[np.ndarray]) -> np.ndarray:
    """Per-layer max-over-classes negative squared distances, shape (N, L)."""
    n = feats[0].shape[0]
    out = np.empty((n, state.num_layers))
    for l in range(state.num_layers):
        best = np.full(n, -np.inf)
        for c in range(state.num_classes):
            diff = feats[l] - state.means[l][c]
            sol = spd_solve(state.factors[l], diff.T)
            np.maximum(best, -np.einsum("nd,dn->n", diff, sol), out=best)
        out[:, l] = best
    return out


def layer_score(state: MahalanobisState, layer_index: int,
                feature: np.ndarray) -> float:
    """Negative squared Mahalanobis distance to the closest class mean."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != (state.factors[layer_index].dim,):
        raise ShapeError(f"feature shape {feature.shape} does not match layer "
                         f"dim {state.factors[layer_index].dim}")
    best = -np.inf
    for c in range(state.num_classes):
        diff = feature - state.means[layer_index][c]
        q = float(diff @ spd_solve(state.factors[layer_index], diff))
        best = max(best, -q)
    return best


def preprocess_input(net: nn.Network, state: MahalanobisState,
                     x: np.ndarray, eps: float) -> np.ndarray:
    """Shift each input by eps along the sign of the final-layer score gradient.

    The score is the closest-class distance at the last capture layer (the
    logits); its gradient is backpropagated to the input. eps 0 returns x
    unchanged.
    """
    if eps < 0:
        raise ValueError(f"eps must be nonnegative, got {eps}")
    if eps == 0.0:
        return x
    trace = nn.forward(net, x)
    z = trace.logits
    k = state.num_classes
    dists = np.empty((k, z.shape[0]))
    for c in range(k):
        diff = z - state.means[-1][c]
        sol = spd_solve(state.factors[-1], diff.T)
        dists[c] = np.einsum("nd,dn->n", diff, sol)
    closest = np.argmin(dists, axis=0)
    diff = z - state.means[-1][closest]
    dscore_dz = -2.0 * spd_solve(state.factors[-1], diff.T).T
    _, dx = nn.backward(net, trace, dscore_dz)
    return x + eps * np.sign(dx)


def _score_matrix(state: MahalanobisState, net: nn.Network,
                  images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Layer-score matrix for a batch, preprocessing included."""
    rows = []
    for start in range(0, len(images), chunk):
        xb = preprocess_input(net, state, images[start:start + chunk],
                              state.preproc_eps)
        trace = nn.forward(net, xb)
        rows.append(_layer_score_matrix(state, pooled_features(trace)))
    return np.concatenate(rows, axis=0)


def fit_combiner(state: MahalanobisState, net: nn.Network,
                 val_in: np.ndarray, val_out: np.ndarray) -> MahalanobisState:
    """Fit the per-layer logistic weighting on validation score vectors.

    Label 1 marks in-distribution. Full-batch gradient descent with a
    Lipschitz-safe step size runs until the gradient norm drops below 1e-6
    or 10k steps elapse. Validation inputs receive the same preprocessing
    as scoring.
    """
    if len(val_in) == 0 or len(val_out) == 0:
        raise ValidationDataError("both validation sides must be non-empty")
    s_in = _score_matrix(state, net, val_in)
    s_out = _score_matrix(state, net, val_out)
    x = np.concatenate([s_in, s_out], axis=0)
    y = np.concatenate([np.ones(len(s_in)), np.zeros(len(s_out))])
    w = np.zeros(x.shape[1])
    b = 0.0
    # Step size from the logistic-loss curvature bound L <= max||x~||^2 / 4.
    max_sq = float(np.max((x * x).sum(axis=1))) + 1.0
    lr = 4.0 / max_sq
    n = len(x)
    for _ in range(10_000):
        margin = x @ w + b
        sigma = 1.0 / (1.0 + np.exp(-margin))
        resid = sigma - y
        grad_w = x.T @ resid / n
        grad_b = float(resid.mean())
        if float(np.sqrt(grad_w @ grad_w + grad_b * grad_b)) < 1e-6:
            break
        w -= lr * grad_w
        b -= lr * grad_b
    return dataclasses.replace(state, weights=w, bias=b)


def score_batch(state: MahalanobisState, net: nn.Network,
                images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Combined confidence scores (pre-sigmoid logit of the layer combiner)."""
    if not state.fitted:
        raise DetectorStateError("combiner has not been fitted")
    return _score_matrix(state, net, images, chunk) @ state.weights + state.bias


def score(state: MahalanobisState, net: nn.Network, x: np.ndarray) -> float:
    """Confidence score for a single example (higher = more in-distribution)."""
    return float(score_batch(state, net, np.asarray(x)[None])[0])


def save_detector(state: MahalanobisState, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": 1,
        "kind": "mahalanobis",
        "num_layers": state.num_layers,
        "num_classes": state.num_classes,
        "layer_dims": [f.dim for f in state.factors],
        "preproc_eps": state.preproc_eps,
        "weights": None if state.weights is None else list(state.weights),
        "bias": state.bias,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    for l in range(state.num_layers):
        save_tensor(path / f"means_l{l}.oodt", state.means[l])
        save_tensor(path / f"chol_l{l}.oodt", state.factors[l].lower)


def load_detector(path) -> MahalanobisState:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("kind") != "mahalanobis" or manifest.get("format_version") != 1:
        raise FormatError(f"{path}: not a mahalanobis detector checkpoint")
    means, factors = [], []
    for l in range(manifest["num_layers"]):
        means.append(load_tensor(path / f"means_l{l}.oodt"))
        lower = load_tensor(path / f"chol_l{l}.oodt")
        factors.append(SpdFactor(dim=lower.shape[0], lower=lower))
    weights = manifest["weights"]
    return MahalanobisState(
        means=means, factors=factors, num_classes=manifest["num_classes"],
        weights=None if weights is None else np.asarray(weights, dtype=np.float64),
        bias=manifest["bias"], preproc_eps=manifest["preproc_eps"])
