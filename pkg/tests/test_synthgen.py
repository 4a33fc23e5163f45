"""Synthetic outlier generators: exact algebraic identities, permutation
structure, and seed determinism."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oodkit import synthgen
from oodkit.errors import ChannelError, DataError, ShapeError
from conftest import small_images


def test_genspec_validation():
    with pytest.raises(ValueError):
        synthgen.GenSpec(kind="sepia", seed=0, count=4)
    with pytest.raises(ValueError):
        synthgen.GenSpec(kind="speckle", seed=0, count=0)
    with pytest.raises(ValueError):
        synthgen.GenSpec(kind="speckle", seed=0, count=4, sigma=-0.1)
    with pytest.raises(ValueError):
        synthgen.GenSpec(kind="uniform_noise", seed=0, count=4)


def test_requires_source():
    assert not synthgen.requires_source("uniform_noise")
    for kind in synthgen.KINDS[1:]:
        assert synthgen.requires_source(kind)


def test_uniform_noise_shape_and_range():
    spec = synthgen.GenSpec(kind="uniform_noise", seed=3, count=6,
                            shape=(3, 4, 4))
    out = synthgen.generate(spec)
    assert out.shape == (6, 3, 4, 4)
    assert out.min() >= 0.0 and out.max() < 1.0


def test_generators_are_seed_deterministic():
    src = small_images(8, seed=1, shape=(3, 8, 8))
    for kind in synthgen.KINDS:
        spec = synthgen.GenSpec(kind=kind, seed=11, count=5,
                                shape=(3, 8, 8) if kind == "uniform_noise"
                                else None)
        a = synthgen.generate(spec, src)
        b = synthgen.generate(spec, src)
        assert np.array_equal(a, b), kind
        other = synthgen.GenSpec(kind=kind, seed=12, count=5,
                                 shape=spec.shape)
        if kind not in ("inverted", "rgb_ghosted"):
            # those two are pure transforms and ignore the seed
            assert not np.array_equal(a, synthgen.generate(other, src)), kind


def test_arithmetic_mean_of_identical_sources_is_identity():
    img = small_images(1, seed=2, shape=(3, 4, 4))[0]
    assert np.array_equal(synthgen.arithmetic_mean(img, img), img)


def test_geometric_mean_of_identical_sources_is_identity():
    img = small_images(1, seed=3, shape=(3, 4, 4))[0]
    assert np.array_equal(synthgen.geometric_mean(img, img), img)


def test_means_draw_distinct_pairs():
    # With two constant sources every mean must mix both, never self-pair.
    src = np.stack([np.zeros((1, 2, 2)), np.ones((1, 2, 2))])
    spec = synthgen.GenSpec(kind="arithmetic_mean", seed=0, count=50)
    out = synthgen.generate(spec, src)
    assert np.all(out == 0.5)


def test_geometric_mean_bounds():
    src = small_images(6, seed=4, shape=(1, 3, 3))
    spec = synthgen.GenSpec(kind="geometric_mean", seed=5, count=30)
    out = synthgen.generate(spec, src)
    assert out.min() >= 0.0 and out.max() <= src.max()
    with pytest.raises(DataError):
        synthgen.generate(spec, src - 2.0)


def test_ghost_is_an_involution_on_dyadic_pixels():
    # rng.uniform values are multiples of 2**-53, so 1 - x is exact and the
    # complement applied twice restores every bit.
    src = small_images(10, seed=6, shape=(3, 4, 4))
    assert np.array_equal(synthgen.ghost(synthgen.ghost(src)), src)


def test_rgb_ghosted_generator():
    src = small_images(4, seed=7, shape=(3, 2, 2))
    spec = synthgen.GenSpec(kind="rgb_ghosted", seed=0, count=6)
    out = synthgen.generate(spec, src)
    assert out.shape == (6, 3, 2, 2)
    assert np.array_equal(out[:4], 1.0 - src)
    assert np.array_equal(out[4:], 1.0 - src[:2])  # cyclic walk
    with pytest.raises(ChannelError):
        synthgen.generate(spec, small_images(4, seed=7, shape=(1, 2, 2)))


def test_inverted_reorders_channels():
    src = small_images(3, seed=8, shape=(3, 2, 2))
    spec = synthgen.GenSpec(kind="inverted", seed=0, count=3)
    out = synthgen.generate(spec, src)
    assert np.array_equal(out[:, 0], src[:, 0])
    assert np.array_equal(out[:, 1], src[:, 2])
    assert np.array_equal(out[:, 2], src[:, 1])
    with pytest.raises(ChannelError):
        synthgen.reorder_channels(small_images(3, seed=8, shape=(2, 2, 2)))


def test_inverted_applied_twice_is_identity():
    src = small_images(3, seed=9, shape=(3, 2, 2))
    once = synthgen.reorder_channels(src)
    assert np.array_equal(synthgen.reorder_channels(once), src)


def test_jigsaw_preserves_pixel_multiset_per_image():
    src = small_images(5, seed=10, shape=(3, 8, 8))
    spec = synthgen.GenSpec(kind="jigsaw", seed=13, count=5)
    out = synthgen.generate(spec, src)
    for k in range(5):
        assert not np.array_equal(out[k], src[k])
        assert np.array_equal(np.sort(out[k].ravel()),
                              np.sort(src[k].ravel()))


def test_jigsaw_scramble_roundtrip():
    img = small_images(1, seed=11, shape=(2, 4, 4))[0]
    perm = np.random.default_rng(0).permutation(16)
    inverse = np.argsort(perm)
    scrambled = synthgen.jigsaw_scramble(img, perm)
    assert np.array_equal(synthgen.jigsaw_scramble(scrambled, inverse), img)


def test_jigsaw_rejects_indivisible_sides():
    src = small_images(2, seed=12, shape=(1, 6, 8))
    spec = synthgen.GenSpec(kind="jigsaw", seed=0, count=2)
    with pytest.raises(ShapeError):
        synthgen.generate(spec, src)


def test_speckle_sigma_zero_is_identity():
    src = small_images(4, seed=13, shape=(2, 3, 3))
    spec = synthgen.GenSpec(kind="speckle", seed=1, count=4, sigma=0.0)
    assert np.array_equal(synthgen.generate(spec, src), src)


def test_speckle_stays_clamped():
    src = small_images(4, seed=14, shape=(2, 3, 3))
    spec = synthgen.GenSpec(kind="speckle", seed=1, count=4, sigma=5.0)
    out = synthgen.generate(spec, src)
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert not np.array_equal(out, src)


def test_source_errors():
    spec = synthgen.GenSpec(kind="speckle", seed=0, count=2)
    with pytest.raises(DataError):
        synthgen.generate(spec)
    with pytest.raises(DataError):
        synthgen.generate(spec, np.empty((0, 1, 2, 2)))
    with pytest.raises(ShapeError):
        synthgen.generate(spec, np.zeros((2, 2)))
    pair = synthgen.GenSpec(kind="arithmetic_mean", seed=0, count=2)
    with pytest.raises(DataError):
        synthgen.generate(pair, np.zeros((1, 1, 2, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(1, 40), st.integers(0, 10_000))
def test_distinct_pairs_never_self_pair(n, count, seed):
    rng = np.random.default_rng(seed)
    i, j = synthgen._distinct_pairs(rng, n, count)
    assert np.all(i != j)
    assert i.min() >= 0 and i.max() < n
    assert j.min() >= 0 and j.max() < n
