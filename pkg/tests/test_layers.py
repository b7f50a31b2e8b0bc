import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import conv2d_loops, maxpool2_loops, numeric_grad, rel_err, softmax_ref
from rinn.errors import DimensionError, ValidationError
from rinn.layers import (
    Conv2DLayer,
    conv2d_backward,
    conv2d_forward,
    logsumexp,
    maxpool2_backward,
    maxpool2_forward,
    relu,
    relu_backward,
    softmax,
    softmax_loss,
)


def _conv(rng, kh, kw, cin, cout):
    return Conv2DLayer(rng.normal(size=(kh, kw, cin, cout)), rng.normal(size=cout))


# conv2d ---------------------------------------------------------------------------


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(4, 5, 1))
    np.testing.assert_array_equal(conv2d_forward(x, Conv2DLayer(np.ones((1, 1, 1, 1)), np.zeros(1))), x)


def test_conv_zero_input_gives_bias(rng):
    layer = _conv(rng, 3, 2, 2, 3)
    y = conv2d_forward(np.zeros((5, 5, 2)), layer)
    assert y.shape == (3, 4, 3)
    np.testing.assert_array_equal(y, np.broadcast_to(layer.bias, y.shape))


def test_conv_matches_loop_oracle(rng):
    x = rng.normal(size=(5, 5, 2))
    layer = _conv(rng, 3, 3, 2, 3)
    np.testing.assert_allclose(conv2d_forward(x, layer), conv2d_loops(x, layer.weights, layer.bias), rtol=0, atol=1e-12)


@given(h=st.integers(1, 5), w=st.integers(1, 5), kh=st.integers(1, 5), kw=st.integers(1, 5),
       cin=st.integers(1, 3), cout=st.integers(1, 3), seed=st.integers(0, 2**16))
def test_conv_oracle_property(h, w, kh, kw, cin, cout, seed):
    if kh > h or kw > w:
        return
    r = np.random.default_rng(seed)
    x = r.normal(size=(h, w, cin))
    layer = _conv(r, kh, kw, cin, cout)
    np.testing.assert_allclose(conv2d_forward(x, layer), conv2d_loops(x, layer.weights, layer.bias), rtol=0, atol=1e-12)


def test_conv_shape_errors(rng):
    layer = _conv(rng, 3, 3, 2, 1)
    with pytest.raises(DimensionError):
        conv2d_forward(np.zeros((2, 5, 2)), layer)
    with pytest.raises(DimensionError):
        conv2d_forward(np.zeros((5, 5, 3)), layer)
    with pytest.raises(DimensionError):
        Conv2DLayer(np.zeros((3, 3, 1, 2)), np.zeros(3))
    with pytest.raises(DimensionError):
        conv2d_backward(np.zeros((5, 5, 2)), layer, np.zeros((2, 2, 1)))


def test_conv_linear_in_input_and_weights(rng):
    layer = Conv2DLayer(rng.normal(size=(2, 3, 2, 2)), np.zeros(2))
    x, y = rng.normal(size=(2, 6, 6, 2))
    a, b = 0.7, -1.3
    np.testing.assert_allclose(conv2d_forward(a * x + b * y, layer),
                               a * conv2d_forward(x, layer) + b * conv2d_forward(y, layer), atol=1e-12)
    w2 = rng.normal(size=layer.weights.shape)
    mixed = Conv2DLayer(a * layer.weights + b * w2, np.zeros(2))
    np.testing.assert_allclose(conv2d_forward(x, mixed),
                               a * conv2d_forward(x, layer) + b * conv2d_forward(x, Conv2DLayer(w2, np.zeros(2))),
                               atol=1e-12)


def test_conv_translation_equivariance(rng):
    layer = _conv(rng, 3, 3, 1, 2)
    x = rng.normal(size=(8, 8, 1))
    shifted = np.roll(x, 1, axis=1)
    np.testing.assert_allclose(conv2d_forward(shifted, layer)[:, 1:], conv2d_forward(x, layer)[:, :-1], atol=1e-12)


def test_conv_backward_zero_dy(rng):
    layer = _conv(rng, 3, 3, 2, 2)
    dx, dw, db = conv2d_backward(rng.normal(size=(5, 5, 2)), layer, np.zeros((3, 3, 2)))
    assert not dx.any() and not dw.any() and not db.any()


def test_conv_backward_single_pixel_gives_patch(rng):
    x = rng.normal(size=(5, 6, 2))
    layer = _conv(rng, 3, 2, 2, 3)
    dy = np.zeros((3, 5, 3))
    dy[1, 2, 1] = 1.0
    _, dw, db = conv2d_backward(x, layer, dy)
    np.testing.assert_array_equal(dw[:, :, :, 1], x[1:4, 2:4, :])
    assert not dw[:, :, :, [0, 2]].any()
    np.testing.assert_array_equal(db, [0.0, 1.0, 0.0])


@pytest.mark.parametrize("k", [1, 2, 3])
def test_conv_backward_finite_differences(rng, k):
    x = rng.normal(size=(5, 4, 2))
    layer = _conv(rng, k, k, 2, 3)
    r = rng.normal(size=(6 - k, 5 - k, 3))

    def f():
        return float(np.sum(conv2d_forward(x, layer) * r))

    dx, dw, db = conv2d_backward(x, layer, r)
    assert rel_err(dx, numeric_grad(f, x)) < 1e-6
    assert rel_err(dw, numeric_grad(f, layer.weights)) < 1e-6
    assert rel_err(db, numeric_grad(f, layer.bias)) < 1e-6


def test_conv_backward_can_skip_dx(rng):
    layer = _conv(rng, 2, 2, 1, 1)
    dx, dw, _ = conv2d_backward(rng.normal(size=(3, 3, 1)), layer, np.ones((2, 2, 1)), need_dx=False)
    assert dx is None and dw.shape == layer.weights.shape


# pooling --------------------------------------------------------------------------


def test_pool_two_by_two():
    y, arg = maxpool2_forward(np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None])
    assert y[0, 0, 0] == 4.0 and arg[0, 0, 0] == 3


def test_pool_constant_ties_go_first(rng):
    y, arg = maxpool2_forward(np.full((4, 6, 2), 0.5))
    assert (y == 0.5).all() and (arg == 0).all()


def test_pool_matches_loop_oracle(rng):
    x = rng.normal(size=(8, 8, 3))
    y, arg = maxpool2_forward(x)
    ry, rarg = maxpool2_loops(x)
    np.testing.assert_array_equal(y, ry)
    np.testing.assert_array_equal(arg, rarg)


def test_pool_odd_extent_errors():
    with pytest.raises(DimensionError):
        maxpool2_forward(np.zeros((5, 4, 1)))


def test_pool_backward_routes_to_argmax(rng):
    x = rng.normal(size=(4, 4, 2))
    _, arg = maxpool2_forward(x)
    assert not maxpool2_backward(arg, np.zeros((2, 2, 2))).any()
    dy = np.zeros((2, 2, 2))
    dy[1, 0, 1] = 1.0
    dx = maxpool2_backward(arg, dy)
    assert dx.sum() == 1.0
    win = x[2:4, 0:2, 1]
    i, j = np.unravel_index(np.argmax(win), win.shape)
    assert dx[2 + i, j, 1] == 1.0


def test_pool_backward_finite_differences(rng):
    # well-separated values keep every window away from ties
    x = (rng.permutation(6 * 4 * 2).reshape(6, 4, 2) * 0.01 + rng.normal(size=(6, 4, 2)) * 1e-4)
    r = rng.normal(size=(3, 2, 2))

    def f():
        return float(np.sum(maxpool2_forward(x)[0] * r))

    _, arg = maxpool2_forward(x)
    assert rel_err(maxpool2_backward(arg, r), numeric_grad(f, x)) < 1e-6


# relu and softmax -----------------------------------------------------------------


def test_relu_examples():
    x = np.array([-2.0, -0.0, 0.0, 3.0])
    np.testing.assert_array_equal(relu(x), [0.0, 0.0, 0.0, 3.0])
    np.testing.assert_array_equal(relu_backward(x, np.ones(4)), [0.0, 0.0, 0.0, 1.0])


def test_relu_finite_differences(rng):
    x = rng.normal(size=20)
    x[np.abs(x) < 1e-3] = 0.5
    r = rng.normal(size=20)

    def f():
        return float(np.sum(relu(x) * r))

    assert rel_err(relu_backward(x, r), numeric_grad(f, x)) < 1e-6


def test_softmax_and_logsumexp_against_reference(rng):
    z = rng.normal(size=7) * 5
    np.testing.assert_allclose(softmax(z), softmax_ref(list(z)), rtol=1e-14)
    assert logsumexp(z) == pytest.approx(math.log(sum(math.exp(v) for v in z)), rel=1e-14)
    big = np.array([1000.0, 1000.0])
    np.testing.assert_allclose(softmax(big), [0.5, 0.5])


def test_loss_two_classes_symmetric():
    res = softmax_loss(np.zeros(2), np.array([1.0, 0.0]))
    assert res.loss == pytest.approx(math.log(2))
    np.testing.assert_allclose(res.dlogits, [-0.5, 0.5])


def test_loss_background_fifteen_classes():
    res = softmax_loss(np.zeros(15), np.zeros(15))
    assert res.loss == pytest.approx(math.log(15))
    np.testing.assert_allclose(res.dlogits, np.full(15, 1 / 15))


@given(seed=st.integers(0, 2**16), c=st.integers(2, 15))
def test_loss_background_gradient_strictly_positive(seed, c):
    z = np.random.default_rng(seed).normal(size=c) * 3
    res = softmax_loss(z, np.zeros(c))
    assert (res.dlogits > 0).all() and (res.dlogits < 1).all()


def test_loss_validation():
    with pytest.raises(ValidationError):
        softmax_loss(np.zeros(3), np.array([1.0, -0.1, 0.0]))
    with pytest.raises(ValidationError):
        softmax_loss(np.zeros(3), np.array([0.8, 0.3, 0.0]))
    with pytest.raises(ValidationError):
        softmax_loss(np.zeros(3), np.zeros(4))


@pytest.mark.parametrize("label", [
    np.array([0.0, 1.0, 0.0, 0.0]),
    np.array([0.0, 0.0, 0.0, 0.0]),
    np.array([0.1, 0.8, 0.1, 0.0]),
])
@pytest.mark.parametrize("floor", [None, 0.0])
def test_loss_finite_differences(rng, label, floor):
    z = rng.normal(size=(3, 4)) * 2
    lab = np.broadcast_to(label, z.shape).copy()

    def f():
        return softmax_loss(z, lab, floor).loss

    assert rel_err(softmax_loss(z, lab, floor).dlogits, numeric_grad(f, z)) < 1e-6


def test_loss_floor_bounds_background_objective():
    # without the floor the all-zero label loss falls without bound as logits drop
    z = np.full(5, -100.0)
    assert softmax_loss(z, np.zeros(5)).loss == pytest.approx(math.log(5) - 100)
    assert softmax_loss(z, np.zeros(5), floor=0.0).loss == pytest.approx(math.log(5))
    # above the floor both objectives agree
    z = np.array([1.0, 2.0, 3.0])
    a, b = softmax_loss(z, np.zeros(3)), softmax_loss(z, np.zeros(3), floor=0.0)
    assert a.loss == b.loss
    np.testing.assert_array_equal(a.dlogits, b.dlogits)
