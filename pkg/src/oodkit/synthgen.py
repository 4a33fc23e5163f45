"""Synthetic outlier image generators.

Seven families of images built from noise or from transformed in-distribution
sources. Each generator is a deterministic function of its seed and the
source images, so regenerated batches are bit-identical. Transforms that act
on one image at a time walk the source cyclically in order; the pairwise
mean generators sample index pairs from the seeded stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ChannelError, DataError, ShapeError

KINDS = (
    "uniform_noise",
    "arithmetic_mean",
    "geometric_mean",
    "jigsaw",
    "speckle",
    "inverted",
    "rgb_ghosted",
)

JIGSAW_GRID = 4

# Channel shift then pair swap; net effect on RGB index order.
INVERTED_ORDER = (0, 2, 1)


@dataclass(frozen=True)
class GenSpec:
    """What to generate: family, RNG seed, batch size, and family knobs."""

    kind: str
    seed: int
    count: int
    shape: tuple[int, int, int] | None = None   # uniform_noise only
    sigma: float = 0.4                           # speckle only

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.count < 1:
            raise ValueError(f"count must be positive, got {self.count}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")
        if self.kind == "uniform_noise" and self.shape is None:
            raise ValueError("uniform_noise requires an output shape")


def requires_source(kind: str) -> bool:
    return kind != "uniform_noise"


def arithmetic_mean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a + b) / 2.0


def geometric_mean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(a * b)


def ghost(images: np.ndarray) -> np.ndarray:
    """Pixelwise complement; applying it twice restores the input exactly."""
    return 1.0 - images


def reorder_channels(images: np.ndarray) -> np.ndarray:
    """Channel shift plus swap, landing on index order (0, 2, 1)."""
    if images.shape[-3] != 3:
        raise ChannelError(f"channel reorder needs 3 channels, got "
                           f"{images.shape[-3]}")
    return np.take(images, INVERTED_ORDER, axis=-3)


def jigsaw_scramble(image: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Rearrange the 4x4 patch grid of one (C, H, W) image by perm."""
    c, h, w = image.shape
    g = JIGSAW_GRID
    if h % g or w % g:
        raise ShapeError(f"jigsaw needs sides divisible by {g}, got {h}x{w}")
    patches = image.reshape(c, g, h // g, g, w // g)
    patches = patches.transpose(1, 3, 0, 2, 4).reshape(g * g, c, h // g, w // g)
    patches = patches[perm]
    patches = patches.reshape(g, g, c, h // g, w // g).transpose(2, 0, 3, 1, 4)
    return patches.reshape(c, h, w)


def speckle(images: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative Gaussian noise, clamped back to [0, 1]."""
    noise = rng.normal(0.0, sigma, size=images.shape)
    return np.clip(images * (1.0 + noise), 0.0, 1.0)


def _distinct_pairs(rng: np.random.Generator, n: int, count: int):
    i = rng.integers(0, n, size=count)
    j = rng.integers(0, n - 1, size=count)
    j[j >= i] += 1
    return i, j


def _cyclic(source: np.ndarray, count: int) -> np.ndarray:
    idx = np.arange(count) % len(source)
    return source[idx]


def generate(spec: GenSpec, source: np.ndarray | None = None) -> np.ndarray:
    """Produce spec.count images of shape (count, C, H, W)."""
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "uniform_noise":
        return rng.uniform(0.0, 1.0, size=(spec.count, *spec.shape))
    if source is None:
        raise DataError(f"{spec.kind} requires source images")
    source = np.asarray(source, dtype=np.float64)
    if source.ndim != 4:
        raise ShapeError(f"source must be (N, C, H, W), got {source.shape}")
    if len(source) == 0:
        raise DataError("source is empty")

    if spec.kind in ("arithmetic_mean", "geometric_mean"):
        if len(source) < 2:
            raise DataError("pairwise means need at least two source images")
        if spec.kind == "geometric_mean" and float(source.min()) < 0:
            raise DataError("geometric mean needs nonnegative pixel values")
        i, j = _distinct_pairs(rng, len(source), spec.count)
        op = arithmetic_mean if spec.kind == "arithmetic_mean" else geometric_mean
        return op(source[i], source[j])

    if spec.kind == "jigsaw":
        picked = _cyclic(source, spec.count)
        out = np.empty_like(picked)
        n_patches = JIGSAW_GRID * JIGSAW_GRID
        identity = np.arange(n_patches)
        for k in range(spec.count):
            perm = rng.permutation(n_patches)
            while np.array_equal(perm, identity):
                perm = rng.permutation(n_patches)
            out[k] = jigsaw_scramble(picked[k], perm)
        return out

    if spec.kind == "speckle":
        return speckle(_cyclic(source, spec.count), spec.sigma, rng)

    if spec.kind == "inverted":
        return reorder_channels(_cyclic(source, spec.count))

    if spec.kind == "rgb_ghosted":
        if source.shape[1] != 3:
            raise ChannelError(f"rgb_ghosted needs 3 channels, got "
                               f"{source.shape[1]}")
        return ghost(_cyclic(source, spec.count))

    raise ValueError(f"unknown generator kind {spec.kind!r}")
