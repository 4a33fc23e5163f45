"""Blob task generators: shapes, value ranges, label structure, determinism,
and the role layout of the end-to-end bundle."""

import numpy as np
import pytest

from oodkit import toydata
from oodkit.errors import DataError


def test_inlier_shapes_and_ranges():
    xx, yy = toydata.inlier_images(40, seed=0)
    assert xx.shape == (40, 3, 8, 8)
    assert yy.shape == (40,)
    assert xx.min() >= 0.0 and xx.max() <= 1.0
    assert set(np.unique(yy)) <= {0, 1, 2, 3}


def test_inlier_num_classes():
    xx, yy = toydata.inlier_images(30, seed=1, num_classes=2)
    assert set(np.unique(yy)) <= {0, 1}
    with pytest.raises(DataError):
        toydata.inlier_images(10, seed=0, num_classes=5)
    with pytest.raises(DataError):
        toydata.inlier_images(10, seed=0, num_classes=1)


def test_inlier_determinism():
    a = toydata.inlier_images(16, seed=5)
    b = toydata.inlier_images(16, seed=5)
    c = toydata.inlier_images(16, seed=6)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert not np.array_equal(a[0], c[0])


def test_classes_are_spatially_separated():
    # class-mean images should peak in different quadrants
    xx, yy = toydata.inlier_images(400, seed=2, noise=0.0, jitter=0.0)
    peaks = []
    for c in range(4):
        mean_img = xx[yy == c].mean(axis=0)[0]
        peaks.append(np.unravel_index(np.argmax(mean_img), mean_img.shape))
    assert len(set(peaks)) == 4


def test_outlier_shapes_and_ranges():
    xx = toydata.outlier_images(24, seed=3)
    assert xx.shape == (24, 3, 8, 8)
    assert xx.min() >= 0.0 and xx.max() <= 1.0
    assert np.array_equal(xx, toydata.outlier_images(24, seed=3))


def test_channel_gains_decay():
    xx, _ = toydata.inlier_images(64, seed=4, noise=0.0)
    means = xx.mean(axis=(0, 2, 3))
    assert means[0] > means[1] > means[2]


def test_exposure_mix_composition():
    train, _ = toydata.inlier_images(32, seed=7)
    mix = toydata.exposure_images(train, 30, seed=9)
    assert mix.shape == (30, 3, 8, 8)
    assert np.array_equal(mix, toydata.exposure_images(train, 30, seed=9))


def test_validation_sets_named():
    train, _ = toydata.inlier_images(32, seed=8)
    val = toydata.validation_sets(train, 12, seed=10)
    assert set(val) == {"uniform_noise", "geometric_mean"}
    for images in val.values():
        assert images.shape == (12, 3, 8, 8)


def test_trend_bundle_roles_and_sizes():
    bundle = toydata.trend_datasets(0, n_train=64, n_test=48, n_oe=30,
                                    n_val=16, n_out_test=40)
    assert set(bundle) == {"d_in_train", "d_in_test", "d_out_oe",
                           "d_out_test", "d_out_val"}
    assert len(bundle["d_in_train"]) == 64
    assert bundle["d_in_train"].num_classes == 4
    assert bundle["d_in_train"].labels is not None
    assert len(bundle["d_in_test"]) == 48
    assert len(bundle["d_out_oe"]) == 30
    assert bundle["d_out_oe"].labels is None
    assert len(bundle["d_out_test"]) == 40
    assert isinstance(bundle["d_out_val"], list)
    assert all(len(v) == 16 for v in bundle["d_out_val"])
    for ds in bundle["d_out_val"]:
        assert ds.role == "d_out_val"


def test_trend_bundle_split_seeds_differ():
    bundle = toydata.trend_datasets(0, n_train=32, n_test=32, n_oe=16,
                                    n_val=8, n_out_test=16)
    assert not np.array_equal(bundle["d_in_train"].images[:32],
                              bundle["d_in_test"].images[:32])


def test_trend_bundle_exposure_variants():
    noise = toydata.trend_datasets(1, n_train=33, n_test=8, n_oe=9, n_val=6,
                                   n_out_test=8)
    mixed = toydata.trend_datasets(1, n_train=33, n_test=8, n_oe=9, n_val=6,
                                   n_out_test=8, noise_exposure=False)
    assert len(noise["d_out_val"]) == 1
    assert len(mixed["d_out_val"]) == 2
    assert not np.array_equal(noise["d_out_oe"].images,
                              mixed["d_out_oe"].images)
