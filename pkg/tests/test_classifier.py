import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pixcontour.classifier import (
    DegenerateTrainingError,
    LinearSvm,
    average_maps,
    detect_multiscale,
    margin_map,
    margin_to_strength,
    predict_margin,
    train_svm,
)
from pixcontour.convnet import init_params, toy_specs
from pixcontour.pyramid import PixelFeatureMap, PyramidConfig
from pixcontour.tensor import ImagePlane


def _blobs(seed, n=200, d=5, shift=2.0, scale=None):
    rng = np.random.default_rng(seed)
    y = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    x = rng.normal(size=(n, d))
    x[:, 0] += shift * y
    if scale is not None:
        x = x * scale + 7.0
    return x, y


def test_svm_separates_shifted_blobs():
    x, y = _blobs(0, shift=3.0, scale=np.array([100.0, 0.01, 1, 1, 1]))
    svm = train_svm(x, y, lam=1e-3, epochs=10, seed=0)
    acc = np.mean(np.sign(predict_margin(svm, x)) == y)
    assert acc > 0.95
    assert svm.dim == 5


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([1e-4, 1e-3, 1e-2]))
def test_objective_history_nonincreasing(seed, lam):
    x, y = _blobs(seed, n=80, shift=0.5)
    svm = train_svm(x, y, lam=lam, epochs=6, seed=seed)
    h = np.array(svm.history)
    assert len(h) == 6
    assert np.all(np.diff(h) <= 0)
    # never worse than the zero hyperplane, whose objective is the mean hinge of 1
    assert h[-1] <= 1.0


def test_training_is_deterministic():
    x, y = _blobs(1)
    a = train_svm(x, y, seed=3)
    b = train_svm(x, y, seed=3)
    np.testing.assert_array_equal(a.weights, b.weights)
    assert a.bias == b.bias


def test_training_input_checks():
    x, y = _blobs(2, n=10)
    with pytest.raises(DegenerateTrainingError):
        train_svm(x, np.ones(10))
    with pytest.raises(ValueError):
        train_svm(x, np.zeros(10))
    with pytest.raises(ValueError):
        train_svm(x[:5], y)
    with pytest.raises(ValueError):
        train_svm(x, y, lam=0.0)


def test_margin_and_strength():
    svm = LinearSvm(np.array([1.0, -2.0]), 0.5)
    assert predict_margin(svm, [1.0, 1.0]) == pytest.approx(-0.5)
    np.testing.assert_allclose(predict_margin(svm, np.eye(2)), [1.5, -1.5])
    with pytest.raises(ValueError):
        predict_margin(svm, [1.0, 2.0, 3.0])
    assert margin_to_strength(0.0) == 0.5
    s = margin_to_strength(np.array([-800.0, -1.0, 1.0, 800.0]))
    assert np.all(np.diff(s) >= 0) and s.min() >= 0 and s.max() <= 1
    assert predict_margin(svm.negated(), [1.0, 1.0]) == pytest.approx(0.5)


def test_margin_map_matches_pointwise():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(4, 3, 5))
    svm = LinearSvm(rng.normal(size=4), 0.3)
    m = margin_map(svm, PixelFeatureMap(f))
    for r in range(3):
        for c in range(5):
            assert m[r, c] == pytest.approx(predict_margin(svm, f[:, r, c]))
    with pytest.raises(ValueError):
        margin_map(LinearSvm(np.ones(3), 0.0), PixelFeatureMap(f))


def test_detect_multiscale_shape_and_range():
    specs = toy_specs(4, 4, 4)
    params = init_params(specs, seed=0)
    cfg = PyramidConfig()
    dim = (4 + 4 + 4) * 9
    svm = LinearSvm(np.random.default_rng(1).normal(size=dim), 0.0)
    img = ImagePlane(np.random.default_rng(2).uniform(size=(3, 20, 24)))
    edge = detect_multiscale(img, specs, params, svm, cfg)
    assert edge.shape == (20, 24)
    assert edge.min() >= 0 and edge.max() <= 1
    single = detect_multiscale(img, specs, params, svm, PyramidConfig(scales=(1.0,)))
    assert not np.array_equal(edge, single)


def test_average_maps():
    a = np.array([[0.2, 1.0]])
    b = np.array([[0.4, 1.0]])
    np.testing.assert_allclose(average_maps([a, b]), [[0.3, 1.0]])
