import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pixcontour.convnet import (
    ConvParams,
    GeometryError,
    TrainHyper,
    TrainLog,
    alexnet_specs,
    backward,
    biased_nll_loss,
    check_params,
    conv,
    format_specs,
    forward,
    head_layer_index,
    init_params,
    layer_geometry,
    layer_lr,
    maxpool,
    min_patch_size,
    nll_loss,
    output_size,
    parse_specs,
    relu,
    sgd_step,
    softmax2,
    toy_specs,
    train,
)
from oracles import conv_loops, maxpool_loops


def test_alexnet_geometry_unpadded():
    sizes = output_size(alexnet_specs(padded=False, head=False), 163, 163)
    conv_pool = [sizes[i][0] for i, s in enumerate(alexnet_specs(False, False)) if s.spatial]
    assert conv_pool == [39, 19, 15, 7, 5, 3, 1]
    assert min_patch_size(alexnet_specs()) == 163


def test_alexnet_geometry_padded():
    specs = alexnet_specs(padded=True, head=False)
    sizes = output_size(specs, 227, 227)
    assert [sizes[i][0] for i, s in enumerate(specs) if s.spatial] == [55, 27, 27, 13, 13, 13, 13]


def test_toy_geometry():
    specs = toy_specs()
    assert min_patch_size(specs) == 21
    assert output_size(specs, 21, 21)[-1] == (1, 1)
    geo = layer_geometry(specs)
    assert (geo[-1].stride, geo[-1].field) == (4, 21)


def test_geometry_error_names_layer():
    with pytest.raises(GeometryError, match="layer 3"):
        output_size(toy_specs(), 6, 6)
    with pytest.raises(GeometryError):
        min_patch_size(alexnet_specs(padded=True))


def test_parse_format_round_trip():
    for specs in (toy_specs(), alexnet_specs(True), alexnet_specs(False, head=False)):
        assert parse_specs(format_specs(specs)) == specs
    with pytest.raises(ValueError):
        parse_specs("c3,r")


def test_head_index_and_lr_multiplier():
    specs = toy_specs()
    assert head_layer_index(specs) == 8
    hyper = TrainHyper(base_lr=0.01, softmax_lr_multiplier=10)
    assert [layer_lr(specs, hyper, i) for i in range(4)] == [0.01, 0.01, 0.01, pytest.approx(0.1)]


def test_forward_matches_loop_oracles():
    rng = np.random.default_rng(3)
    specs = [conv(3, 4, stride=2, pad=1), relu(), maxpool(2, 1), conv(2, 2), softmax2()]
    params = init_params(specs, seed=1)
    for p in params:
        p.bias[:] = rng.normal(size=p.bias.shape)
    x = rng.normal(size=(3, 9, 9))
    acts, probs = forward(specs, params, x)
    a1 = conv_loops(x, params[0].weight, params[0].bias, 2, 1)
    np.testing.assert_allclose(acts[1], a1, atol=1e-12)
    a3 = maxpool_loops(np.maximum(a1, 0), 2, 1)
    np.testing.assert_allclose(acts[3], a3, atol=1e-12)
    z = conv_loops(a3, params[1].weight, params[1].bias, 1, 0)
    e = np.exp(z - z.max(axis=0))
    np.testing.assert_allclose(probs, e / e.sum(axis=0), atol=1e-12)
    np.testing.assert_allclose(probs.sum(axis=0), 1.0)


def test_batched_forward_equals_single():
    specs = toy_specs(4, 5, 6)
    params = init_params(specs, seed=2)
    x = np.random.default_rng(0).uniform(size=(3, 3, 23, 23))
    _, batch = forward(specs, params, x)
    for n in range(3):
        np.testing.assert_allclose(forward(specs, params, x[n])[1], batch[n], atol=1e-13)


def test_init_is_seeded_and_checked():
    specs = toy_specs()
    a, b = init_params(specs, seed=5), init_params(specs, seed=5)
    assert all(np.array_equal(p.weight, q.weight) for p, q in zip(a, b))
    check_params(specs, a)
    with pytest.raises(ValueError):
        check_params(specs, a[:-1])
    bad = [p.copy() for p in a]
    bad[0].weight[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        check_params(specs, bad)


def test_maxpool_gradient_goes_to_first_maximum():
    from pixcontour.convnet import _pool_backward

    x = np.array([[[1.0, 1.0], [1.0, 0.0]]])
    dx = _pool_backward(x[None], maxpool(2, 2), np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(dx[0, 0], [[1, 0], [0, 0]])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 5.0), st.floats(0.1, 5.0))
def test_biased_loss_is_weighted_sum(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    p1 = rng.uniform(1e-6, 1 - 1e-6, size=(4, 1, 2))
    probs = np.stack([1 - p1, p1], axis=1)
    y = rng.integers(0, 2, size=4)
    pos = sum(nll_loss(probs[i], 1) for i in range(4) if y[i] == 1)
    neg = sum(nll_loss(probs[i], 0) for i in range(4) if y[i] == 0)
    assert biased_nll_loss(probs, y, alpha, beta) == pytest.approx(alpha * pos + beta * neg, rel=1e-12)


def test_loss_floor_and_validation():
    probs = np.array([[[1.0]], [[0.0]]])
    assert nll_loss(probs, 1) == pytest.approx(-np.log(1e-12))
    with pytest.raises(ValueError):
        nll_loss(probs, 2)
    with pytest.raises(ValueError):
        biased_nll_loss(probs, 1, 0.0, 1.0)


def test_saturated_sample_has_no_gradient():
    specs = [conv(1, 2), softmax2()]
    params = [ConvParams(np.zeros((2, 3, 1, 1)), np.array([60.0, -60.0]))]
    x = np.zeros((3, 1, 1))
    acts, probs = forward(specs, params, x)
    g = backward(specs, params, acts, 1)
    assert np.all(g[0].bias == 0)


def test_sgd_momentum_recursion():
    specs = [conv(1, 2), softmax2()]
    p = [ConvParams(np.ones((2, 3, 1, 1)), np.zeros(2))]
    g = [ConvParams(np.full((2, 3, 1, 1), 2.0), np.ones(2))]
    hyper = TrainHyper(base_lr=0.1, softmax_lr_multiplier=1.0, momentum=0.5)
    p1, v1 = sgd_step(specs, p, g, hyper)
    np.testing.assert_allclose(p1[0].weight, 1 - 0.2)
    p2, v2 = sgd_step(specs, p1, g, hyper, v1)
    # v2 = 0.5 * 0.2 + 0.2
    np.testing.assert_allclose(v2[0].weight, 0.3)
    np.testing.assert_allclose(p2[0].weight, 0.8 - 0.3)
    with pytest.raises(ValueError):
        sgd_step(specs, p, [ConvParams(np.ones((1, 3, 1, 1)), np.ones(2))], hyper)


def test_train_reduces_loss_on_separable_patches():
    specs = parse_specs("c3:4,r,c3:2,s")
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 0.2, size=(64, 3, 5, 5))
    y = rng.integers(0, 2, size=64)
    x[y == 1, :, 2, :] += 0.8  # a bright row through the centre marks an edge
    hyper = TrainHyper(base_lr=0.05, epochs=15, batch_size=16, seed=0)
    log = TrainLog()
    order = np.random.default_rng(1)

    def batches(epoch):
        idx = order.permutation(64)
        for s in range(0, 64, 16):
            yield x[idx[s:s + 16]], y[idx[s:s + 16]]

    params = train(specs, init_params(specs, seed=0), batches, hyper, train_log=log)
    assert len(log.epoch_losses) == 15
    assert log.epoch_losses[-1] < 0.5 * log.epoch_losses[0]
    assert all(b < a for a, b in zip(log.epoch_losses[:5], log.epoch_losses[1:6]))
    probs = forward(specs, params, x)[1][:, 1, 0, 0]
    assert np.mean((probs > 0.5) == (y == 1)) > 0.9
