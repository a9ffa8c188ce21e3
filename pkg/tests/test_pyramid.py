import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pixcontour.convnet import forward, init_params, toy_specs
from pixcontour.pyramid import (
    NEIGHBOR_ORDER,
    PixelFeatureMap,
    PyramidConfig,
    body_conv_layers,
    extract_pixel_features,
    extract_pyramid,
    feature_dim,
    resolve_config,
    stack_neighbors,
    stitch,
    unstitch,
)
from pixcontour.tensor import ImagePlane


def _image(h=24, w=20, seed=0):
    return ImagePlane(np.random.default_rng(seed).uniform(size=(3, h, w)))


def test_body_layers_exclude_head_and_use_rectified_output():
    layers = body_conv_layers(toy_specs())
    assert [l.number for l in layers] == [1, 2, 3]
    assert [l.activation for l in layers] == [2, 5, 8]
    assert [l.stride for l in layers] == [1, 2, 4]
    assert [l.radius for l in layers] == [1, 4, 10]


def test_resolve_config_defaults_and_validation():
    cfg = resolve_config(PyramidConfig(), toy_specs())
    assert (cfg.align, cfg.gutter) == (4, 12)
    with pytest.raises(ValueError):
        resolve_config(PyramidConfig(gutter=5), toy_specs())
    with pytest.raises(ValueError):
        resolve_config(PyramidConfig(selected_layers=(4,)), toy_specs())


def test_feature_dim_toy():
    assert feature_dim(toy_specs(), PyramidConfig()) == (16 + 32 + 32) * 9
    assert feature_dim(toy_specs(), PyramidConfig(neighbor_k=0, selected_layers=(2,))) == 32


def test_stitch_layout():
    img = _image(10, 8)
    cfg = resolve_config(PyramidConfig(scales=(1.0, 2.0, 0.5)), toy_specs())
    plane, places = stitch(img, cfg)
    g = cfg.gutter
    for p in places:
        assert p.top % cfg.align == 0 and p.left % cfg.align == 0
        assert p.top >= g and p.left >= g
    for a, b in zip(places, places[1:]):
        assert b.left - (a.left + a.scaled_width) >= 2 * g
    assert [(p.scaled_height, p.scaled_width) for p in places] == [(10, 8), (20, 16), (5, 4)]
    p0 = places[0]
    np.testing.assert_array_equal(plane.rgb[:, p0.top:p0.top + 10, p0.left:p0.left + 8], img.rgb)
    np.testing.assert_allclose(plane.rgb[:, 0, 0], img.mean_color())


def test_unstitch_offset_zero_uses_floor_rule():
    act = np.arange(40.0).reshape(1, 4, 10)
    places = stitch(_image(4, 8), PyramidConfig(scales=(1.0,), gutter=4, align=2))[1]
    (tile,) = unstitch(act, places, layer_stride=2)
    # unit range starts at floor(4 / 2) in both directions
    assert tile[0, 0, 0] == act[0, 2, 2]


def test_stack_neighbors_order_and_clamp():
    f = np.arange(12.0).reshape(1, 3, 4)
    out = stack_neighbors(PixelFeatureMap(f), 1).features
    assert out.shape == (9, 3, 4)
    r, c = 1, 1
    expected = [f[0, r, c]] + [f[0, r + dr, c + dc] for dr, dc in NEIGHBOR_ORDER]
    np.testing.assert_array_equal(out[:, r, c], expected)
    # top-left corner: every neighbour clamps back into the image
    np.testing.assert_array_equal(out[:, 0, 0], [0, 0, 0, 1, 1, 5, 4, 4, 0])
    assert stack_neighbors(PixelFeatureMap(f), 0).dim == 1


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(2, 7), st.integers(2, 7), st.integers(0, 2**31))
def test_stack_neighbors_block_k_is_shifted_copy(k, h, w, seed):
    f = np.random.default_rng(seed).normal(size=(2, h, w))
    out = stack_neighbors(PixelFeatureMap(f), k).features
    for n, (dr, dc) in enumerate(NEIGHBOR_ORDER, start=1):
        rows = np.clip(np.arange(h) + dr * k, 0, h - 1)
        cols = np.clip(np.arange(w) + dc * k, 0, w - 1)
        np.testing.assert_array_equal(out[2 * n:2 * n + 2], f[:, rows][:, :, cols])


def test_extracted_shapes_and_determinism():
    specs = toy_specs(4, 6, 8)
    params = init_params(specs, seed=0)
    img = _image()
    cfg = PyramidConfig()
    pyr = extract_pyramid(img, specs, params, cfg)
    assert pyr[1.0].features.shape == ((4 + 6 + 8) * 9, 24, 20)
    assert pyr[2.0].features.shape == ((4 + 6 + 8) * 9, 48, 40)
    again = extract_pixel_features(img, specs, params, cfg)
    np.testing.assert_array_equal(again.features, pyr[1.0].features)


def test_plane_units_equal_standalone_units():
    """A tile's interior units match the network run on the tile alone."""
    specs = toy_specs(4, 6, 8)
    params = init_params(specs, seed=1)
    img = _image(32, 28, seed=2)
    cfg = resolve_config(PyramidConfig(scales=(1.0, 2.0)), specs)
    plane, places = stitch(img, cfg)
    plane_acts, _ = forward(specs[:8], params[:3], plane.rgb)
    for p, tile in zip(places, (img, img.scaled(2.0))):
        alone, _ = forward(specs[:8], params[:3], tile.rgb)
        for layer in body_conv_layers(specs):
            s = layer.stride
            a = alone[layer.activation]
            r0, c0 = p.top // s, p.left // s
            got = plane_acts[layer.activation][:, r0:r0 + a.shape[1], c0:c0 + a.shape[2]]
            np.testing.assert_allclose(got, a, atol=1e-10)
