"""Feature-correlation range detector over higher-order Gram matrices.

For each capture layer and each order p, channelwise Gram matrices
G = (F^p (F^p)^T)^(1/p) are summarized by their upper triangle, and
per-predicted-class min/max bounds are recorded on training data. At test
time, out-of-range entries contribute relative deviations; per-layer
deviations are normalized by their expected value on held-out in-distribution
data and summed into a single score (negated so higher means more
in-distribution).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .errors import (
    DetectorStateError,
    FormatError,
    MissingClassError,
    ShapeError,
    ValidationDataError,
)
from .linalg import load_tensor, save_tensor

DEFAULT_ORDERS = (1, 2, 4, 8)

_DENOM_FLOOR = 1e-12


@dataclass(frozen=True)
class GramBounds:
    """Per (layer, order, class) upper-triangle Gram bounds."""

    orders: tuple[int, ...]
    mins: list[np.ndarray]           # per layer: (P, K, E_l)
    maxs: list[np.ndarray]
    num_classes: int
    expected_dev: np.ndarray | None = None   # (L,), set by calibrate_normalizer

    @property
    def num_layers(self) -> int:
        return len(self.mins)

    @property
    def calibrated(self) -> bool:
        return self.expected_dev is not None


def _check_order(p: int) -> None:
    if not isinstance(p, (int, np.integer)) or p < 1:
        raise ValueError(f"order must be a positive integer, got {p!r}")


def _feature_maps(feats: np.ndarray) -> np.ndarray:
    """Capture features as (N, C, S) channel-by-position maps."""
    if feats.ndim == 4:
        n, c = feats.shape[:2]
        return feats.reshape(n, c, -1)
    return feats[:, :, None]


def _batch_gram(maps: np.ndarray, p: int) -> np.ndarray:
    """Upper-triangle entries of order-p Gram matrices, shape (N, E)."""
    fp = maps if p == 1 else maps ** p
    s = np.einsum("ncs,nds->ncd", fp, fp)
    if p > 1:
        # Signed root so odd orders stay real on signed features.
        s = np.sign(s) * np.abs(s) ** (1.0 / p)
    rows, cols = np.triu_indices(s.shape[1])
    return s[:, rows, cols]


def gram(feature_map: np.ndarray, p: int) -> np.ndarray:
    """Order-p Gram upper triangle for one (channels, positions) map."""
    _check_order(p)
    f = np.asarray(feature_map, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if f.ndim != 2:
        raise ShapeError(f"feature map must be 1-D or 2-D, got shape {f.shape}")
    return _batch_gram(f[None], int(p))[0]


def fit_bounds(net: nn.Network, images: np.ndarray,
               orders: tuple[int, ...] = DEFAULT_ORDERS,
               chunk: int = 256) -> GramBounds:
    """Record per-class entry ranges on training data, keyed by the network's
    own predicted class. Every class must appear among the predictions."""
    for p in orders:
        _check_order(p)
    orders = tuple(int(p) for p in orders)
    k = net.num_classes
    mins: list[np.ndarray | None] = [None] * net.num_captures
    maxs: list[np.ndarray | None] = [None] * net.num_captures
    seen = np.zeros(k, dtype=np.int64)
    for start in range(0, len(images), chunk):
        trace = nn.forward(net, images[start:start + chunk])
        preds = np.argmax(trace.logits, axis=1)
        np.add.at(seen, preds, 1)
        for l, feats in enumerate(trace.features):
            maps = _feature_maps(feats)
            for pi, p in enumerate(orders):
                g = _batch_gram(maps, p)
                if mins[l] is None:
                    e = g.shape[1]
                    mins[l] = np.full((len(orders), k, e), np.inf)
                    maxs[l] = np.full((len(orders), k, e), -np.inf)
                for c in np.unique(preds):
                    rows = g[preds == c]
                    np.minimum(mins[l][pi, c], rows.min(axis=0), out=mins[l][pi, c])
                    np.maximum(maxs[l][pi, c], rows.max(axis=0), out=maxs[l][pi, c])
    for c in range(k):
        if seen[c] == 0:
            raise MissingClassError(c)
    return GramBounds(orders=orders, mins=mins, maxs=maxs, num_classes=k)


def _entry_deviations(vals: np.ndarray, mins: np.ndarray,
                      maxs: np.ndarray) -> np.ndarray:
    lo = np.maximum(np.abs(mins), _DENOM_FLOOR)
    hi = np.maximum(np.abs(maxs), _DENOM_FLOOR)
    return np.where(vals < mins, (mins - vals) / lo,
                    np.where(vals > maxs, (vals - maxs) / hi, 0.0))


def layer_deviation(bounds: GramBounds, layer_index: int,
                    gram_vectors: np.ndarray, predicted_class: int) -> float:
    """Total out-of-range deviation for one layer, summed over orders and
    entries. gram_vectors stacks one upper-triangle vector per order, (P, E)."""
    vals = np.asarray(gram_vectors, dtype=np.float64)
    mins = bounds.mins[layer_index][:, predicted_class]
    maxs = bounds.maxs[layer_index][:, predicted_class]
    if vals.shape != mins.shape:
        raise ShapeError(f"gram vectors shape {vals.shape} does not match "
                         f"bounds shape {mins.shape}")
    return float(_entry_deviations(vals, mins, maxs).sum())


def delta_matrix(bounds: GramBounds, net: nn.Network, images: np.ndarray,
                 chunk: int = 256) -> np.ndarray:
    """Per-layer deviation totals for a batch, shape (N, L)."""
    rows = []
    for start in range(0, len(images), chunk):
        trace = nn.forward(net, images[start:start + chunk])
        preds = np.argmax(trace.logits, axis=1)
        block = np.zeros((len(preds), bounds.num_layers))
        for l, feats in enumerate(trace.features):
            maps = _feature_maps(feats)
            for pi, p in enumerate(bounds.orders):
                g = _batch_gram(maps, p)
                dev = _entry_deviations(g, bounds.mins[l][pi, preds],
                                        bounds.maxs[l][pi, preds])
                block[:, l] += dev.sum(axis=1)
        rows.append(block)
    return np.concatenate(rows, axis=0)


def calibrate_normalizer(bounds: GramBounds, net: nn.Network,
                         images: np.ndarray) -> GramBounds:
    """Set per-layer expected deviations from held-out in-distribution data.

    Expectations are means over the partition, floored at 1e-12 so layers
    that never deviate still divide cleanly.
    """
    if len(images) == 0:
        raise ValidationDataError("normalizer partition must be non-empty")
    expected = delta_matrix(bounds, net, images).mean(axis=0)
    return dataclasses.replace(bounds, expected_dev=np.maximum(expected, _DENOM_FLOOR))


def score_batch(bounds: GramBounds, net: nn.Network, images: np.ndarray,
                chunk: int = 256) -> np.ndarray:
    """Negated normalized total deviation (higher = more in-distribution)."""
    if not bounds.calibrated:
        raise DetectorStateError("normalizer has not been calibrated")
    deltas = delta_matrix(bounds, net, images, chunk)
    return -(deltas / bounds.expected_dev).sum(axis=1)


def score(bounds: GramBounds, net: nn.Network, x: np.ndarray) -> float:
    return float(score_batch(bounds, net, np.asarray(x)[None])[0])


def save_detector(bounds: GramBounds, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": 1,
        "kind": "gram",
        "orders": list(bounds.orders),
        "num_classes": bounds.num_classes,
        "num_layers": bounds.num_layers,
        "expected_dev": None if bounds.expected_dev is None
        else list(bounds.expected_dev),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    for l in range(bounds.num_layers):
        save_tensor(path / f"mins_l{l}.oodt", bounds.mins[l])
        save_tensor(path / f"maxs_l{l}.oodt", bounds.maxs[l])


def load_detector(path) -> GramBounds:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("kind") != "gram" or manifest.get("format_version") != 1:
        raise FormatError(f"{path}: not a gram detector checkpoint")
    mins, maxs = [], []
    for l in range(manifest["num_layers"]):
        mins.append(load_tensor(path / f"mins_l{l}.oodt"))
        maxs.append(load_tensor(path / f"maxs_l{l}.oodt"))
    expected = manifest["expected_dev"]
    return GramBounds(
        orders=tuple(manifest["orders"]), mins=mins, maxs=maxs,
        num_classes=manifest["num_classes"],
        expected_dev=None if expected is None else np.asarray(expected, dtype=np.float64))
