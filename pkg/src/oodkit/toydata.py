"""Small synthetic image tasks for end-to-end runs on a laptop.

Inliers are single Gaussian bumps pinned near one of num_classes anchor
positions (the class), with jittered centers, amplitude noise, fixed channel
gains, and uniform background noise. Outliers reuse the same palette but
scatter several narrow bumps at random positions, so they overlap the inlier
statistics without matching any class template.
"""

from __future__ import annotations

import numpy as np

from .data import Dataset
from .errors import DataError
from .synthgen import GenSpec, generate


def _channel_gains(channels: int) -> np.ndarray:
    return 0.7 ** np.arange(channels)


def _grid(height: int, width: int):
    yy = np.arange(height, dtype=np.float64)[:, None]
    xx = np.arange(width, dtype=np.float64)[None, :]
    return yy, xx


def _render(centers_y, centers_x, amps, sigma, shape, noise, rng):
    c, h, w = shape
    yy, xx = _grid(h, w)
    d2 = (yy[None] - centers_y[:, None, None]) ** 2 \
        + (xx[None] - centers_x[:, None, None]) ** 2
    field = amps[:, None, None] * np.exp(-d2 / (2.0 * sigma * sigma))
    gains = _channel_gains(c)
    images = gains[None, :, None, None] * field[:, None]
    images = images + rng.uniform(0.0, noise, size=images.shape)
    return np.clip(images, 0.0, 1.0)


def inlier_images(count: int, seed: int, num_classes: int = 4,
                  shape: tuple[int, int, int] = (3, 8, 8), noise: float = 0.3,
                  amplitude: float = 0.85, sigma: float = 1.1,
                  jitter: float = 1.5):
    """Labeled class-anchored bump images, (count, C, H, W) plus labels."""
    if not 2 <= num_classes <= 4:
        raise DataError("the blob task defines at most four anchor positions")
    rng = np.random.default_rng(seed)
    _, h, w = shape
    lo_y, hi_y = 0.3 * (h - 1), 0.7 * (h - 1)
    lo_x, hi_x = 0.3 * (w - 1), 0.7 * (w - 1)
    anchors = np.array([[lo_y, lo_x], [hi_y, hi_x], [lo_y, hi_x], [hi_y, lo_x]])
    anchors = anchors[:num_classes]
    labels = rng.integers(0, num_classes, size=count)
    offsets = rng.uniform(-jitter, jitter, size=(count, 2))
    centers = anchors[labels] + offsets
    amps = amplitude * (1.0 + rng.uniform(-0.25, 0.25, size=count))
    images = _render(centers[:, 0], centers[:, 1], amps, sigma, shape, noise, rng)
    return images, labels


def outlier_images(count: int, seed: int,
                   shape: tuple[int, int, int] = (3, 8, 8), noise: float = 0.35,
                   amplitude: float = 0.85, sigma: float = 0.7,
                   bumps: int = 2):
    """Scatter-bump images drawn from the same palette, (count, C, H, W)."""
    rng = np.random.default_rng(seed)
    _, h, w = shape
    total = count * bumps
    cy = rng.uniform(0.5, h - 1.5, size=total)
    cx = rng.uniform(0.5, w - 1.5, size=total)
    amps = amplitude * (1.0 + rng.uniform(-0.25, 0.25, size=total))
    flat = _render(cy, cx, amps, sigma, shape, 0.0, rng)
    images = flat.reshape(count, bumps, *shape).sum(axis=1)
    images = images + rng.uniform(0.0, noise, size=images.shape)
    return np.clip(images, 0.0, 1.0)


def exposure_images(train_images: np.ndarray, count: int, seed: int) -> np.ndarray:
    """Auxiliary outlier mix for fine-tuning: noise, speckled and scrambled
    inliers in equal shares."""
    shape = train_images.shape[1:]
    n_each = count // 3
    parts = [
        generate(GenSpec("uniform_noise", seed + 1, count - 2 * n_each,
                         shape=shape)),
        generate(GenSpec("speckle", seed + 2, n_each), train_images),
        generate(GenSpec("jigsaw", seed + 3, n_each), train_images),
    ]
    return np.concatenate(parts, axis=0)


def validation_sets(train_images: np.ndarray, count: int,
                    seed: int) -> dict[str, np.ndarray]:
    """Synthetic tuning sets, separate seeds from the exposure mix."""
    shape = train_images.shape[1:]
    return {
        "uniform_noise": generate(GenSpec("uniform_noise", seed + 11, count,
                                          shape=shape)),
        "geometric_mean": generate(GenSpec("geometric_mean", seed + 12, count),
                                   train_images),
    }


def trend_datasets(seed: int, n_train: int = 1024, n_test: int = 1024,
                   n_oe: int = 768, n_val: int = 256, n_out_test: int = 1024,
                   noise_exposure: bool = True) -> dict[str, Dataset]:
    """The full dataset bundle for one end-to-end run, keyed by role.

    By default the auxiliary and tuning outliers are plain uniform noise;
    noise_exposure False swaps in the transformed-inlier mixes instead.
    """
    train_x, train_y = inlier_images(n_train, seed)
    test_x, test_y = inlier_images(n_test, seed + 101)
    shape = train_x.shape[1:]
    if noise_exposure:
        oe_x = generate(GenSpec("uniform_noise", seed + 202, n_oe, shape=shape))
        val = {"uniform_noise": generate(
            GenSpec("uniform_noise", seed + 404, n_val, shape=shape))}
    else:
        oe_x = exposure_images(train_x, n_oe, seed + 202)
        val = validation_sets(train_x, n_val, seed + 404)
    out_x = outlier_images(n_out_test, seed + 303)
    bundle = {
        "d_in_train": Dataset(images=train_x, labels=train_y, role="d_in_train",
                              name="blobs-train", num_classes=4),
        "d_in_test": Dataset(images=test_x, labels=test_y, role="d_in_test",
                             name="blobs-test", num_classes=4),
        "d_out_oe": Dataset(images=oe_x, role="d_out_oe", name="exposure"),
        "d_out_test": Dataset(images=out_x, role="d_out_test",
                              name="scatter-blobs"),
        "d_out_val": [Dataset(images=images, role="d_out_val",
                              name=f"val-{name}")
                      for name, images in val.items()],
    }
    return bundle
