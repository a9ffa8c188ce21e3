import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pixcontour.tensor import ImagePlane, as_tensor, bilinear_resize, crop_patch
from oracles import resize_pointwise


def test_resize_reproduces_a_linear_ramp():
    t = np.array([[[0.0, 1, 2], [3, 4, 5]]])
    out = bilinear_resize(t, 3, 4)
    y, x = np.mgrid[0:3, 0:4]
    # corner aligned: output pixel (i, j) samples input (i/2, 2j/3)
    expected = 3 * (y / 2) + 2 * x / 3
    np.testing.assert_allclose(out[0], expected, atol=1e-14)


def test_resize_to_one_pixel_takes_the_centre():
    t = np.arange(9.0).reshape(1, 3, 3)
    assert bilinear_resize(t, 1, 1)[0, 0, 0] == pytest.approx(4.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31))
def test_resize_matches_pointwise_oracle(h, w, oh, ow, seed):
    t = np.random.default_rng(seed).normal(size=(2, h, w))
    np.testing.assert_allclose(bilinear_resize(t, oh, ow), resize_pointwise(t, oh, ow), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
def test_resize_identity_and_range(h, w, seed):
    t = np.random.default_rng(seed).uniform(-3, 3, size=(3, h, w))
    np.testing.assert_array_equal(bilinear_resize(t, h, w), t)
    out = bilinear_resize(t, 2 * h + 1, w + 3)
    assert np.all(out >= t.min(axis=(1, 2))[:, None, None] - 1e-15)
    assert np.all(out <= t.max(axis=(1, 2))[:, None, None] + 1e-15)
    # corners coincide
    np.testing.assert_allclose(out[:, [0, 0, -1, -1], [0, -1, 0, -1]], t[:, [0, 0, -1, -1], [0, -1, 0, -1]])


def test_resize_rejects_bad_input():
    with pytest.raises(ValueError):
        bilinear_resize(np.zeros((1, 0, 3)), 2, 2)
    with pytest.raises(ValueError):
        bilinear_resize(np.zeros((1, 2, 2)), 0, 2)
    with pytest.raises(ValueError):
        as_tensor(np.zeros((2, 2)))


def test_image_plane_clamps_and_scales():
    img = ImagePlane(np.full((3, 10, 7), 1.5))
    assert img.rgb.max() == 1.0
    s = img.scaled(2.0)
    assert (s.height, s.width) == (20, 14)
    assert img.scaled(0.5).width == 4
    with pytest.raises(ValueError):
        ImagePlane(np.zeros((1, 4, 4)))
    with pytest.raises(ValueError):
        ImagePlane(np.full((3, 2, 2), np.nan))


def test_crop_patch_replicates_border():
    t = np.arange(16.0).reshape(1, 4, 4)
    p = crop_patch(t, 0, 0, 3)
    np.testing.assert_array_equal(p[0], [[0, 0, 1], [0, 0, 1], [4, 4, 5]])
    interior = crop_patch(t, 2, 2, 3)
    np.testing.assert_array_equal(interior, t[:, 1:4, 1:4])
    with pytest.raises(ValueError):
        crop_patch(t, 1, 1, 4)
