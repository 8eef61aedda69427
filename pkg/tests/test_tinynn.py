import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from keygrid import tinynn as nn


def naive_conv(x, w, b, stride):
    """Six-loop reference: 3x3 kernel, zero padding 1, channels-last."""
    B, H, W, C = x.shape
    O = w.shape[-1]
    Ho, Wo = (H - 1) // stride + 1, (W - 1) // stride + 1
    out = np.zeros((B, Ho, Wo, O))
    for n in range(B):
        for i in range(Ho):
            for j in range(Wo):
                for o in range(O):
                    acc = b[o]
                    for dy in range(3):
                        for dx in range(3):
                            yy, xx = i * stride + dy - 1, j * stride + dx - 1
                            if 0 <= yy < H and 0 <= xx < W:
                                acc += np.dot(x[n, yy, xx], w[dy, dx, :, o])
                    out[n, i, j, o] = acc
    return out


def rel(a, b, floor=1e-3):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


def fd_grad(f, arr, h):
    """Central differences of scalar ``f()`` w.r.t. every element of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


# -- dense -----------------------------------------------------------------------------

def test_dense_identity():
    layer = nn.DenseLayer(np.eye(4), np.zeros(4))
    x = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(nn.dense_forward(layer, x), x)


def test_dense_shape_mismatch():
    layer = nn.DenseLayer(np.eye(4), np.zeros(4))
    with pytest.raises(ValueError):
        nn.dense_forward(layer, np.ones((2, 3)))


def test_dense_zero_upstream():
    rng = np.random.default_rng(1)
    layer = nn.init_dense(rng, 5, 3)
    (dw, db), dx = nn.dense_backward(layer, rng.normal(size=(4, 5)), np.zeros((4, 3)))
    assert not dw.any() and not db.any() and not dx.any()


def test_dense_backward_fd_100_fixtures_float32():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        n_in, n_out = rng.integers(1, 6, size=2)
        w = rng.normal(size=(n_out, n_in))
        b = rng.normal(size=n_out)
        x = rng.normal(size=(3, n_in))
        up = rng.normal(size=(3, n_out))
        layer32 = nn.DenseLayer(w.astype(np.float32), b.astype(np.float32))
        (dw, db), dx = nn.dense_backward(layer32, x.astype(np.float32), up.astype(np.float32))
        ref = layer32.astype(np.float64)
        x64 = x.astype(np.float32).astype(np.float64)

        def f():
            return float(np.sum(nn.dense_forward(ref, x64) * up))

        worst = max(worst, rel(dw, fd_grad(f, ref.weights, 1e-4)), rel(db, fd_grad(f, ref.bias, 1e-4)),
                    rel(dx, fd_grad(f, x64, 1e-4)))
    assert worst <= 1e-3


# -- conv ---------------------------------------------------------------------------------

def test_conv_delta_kernel_identity():
    w = np.zeros((3, 3, 4, 4))
    w[1, 1] = np.eye(4)
    layer = nn.ConvLayer(w, np.zeros(4))
    x = np.random.default_rng(0).normal(size=(2, 5, 6, 4))
    np.testing.assert_array_equal(nn.conv_forward(layer, x), x)


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("hw", [(5, 5), (6, 4), (8, 8)])
def test_conv_matches_naive(stride, hw):
    rng = np.random.default_rng(3)
    layer = nn.ConvLayer(rng.normal(size=(3, 3, 3, 2)), rng.normal(size=2), stride)
    x = rng.normal(size=(2, *hw, 3))
    np.testing.assert_allclose(nn.conv_forward(layer, x), naive_conv(x, layer.weights, layer.bias, stride),
                               atol=1e-5)


def test_conv_stride2_shape():
    rng = np.random.default_rng(0)
    layer = nn.init_conv(rng, 3, 8, stride=2)
    assert nn.conv_forward(layer, np.zeros((1, 32, 32, 3), dtype=np.float32)).shape == (1, 16, 16, 8)


def test_conv_shape_mismatch():
    layer = nn.init_conv(np.random.default_rng(0), 3, 2)
    with pytest.raises(ValueError):
        nn.conv_forward(layer, np.zeros((1, 4, 4, 5)))


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_backward_fd_100_fixtures_float32(stride):
    rng = np.random.default_rng(4 + stride)
    worst = 0.0
    for _ in range(100):
        c_in, c_out = rng.integers(1, 3, size=2)
        hw = tuple(rng.integers(2, 6, size=2))
        w = rng.normal(size=(3, 3, c_in, c_out))
        b = rng.normal(size=c_out)
        x = rng.normal(size=(1, *hw, c_in))
        layer32 = nn.ConvLayer(w.astype(np.float32), b.astype(np.float32), stride)
        out_shape = nn.conv_forward(layer32, x.astype(np.float32)).shape
        up = rng.normal(size=out_shape)
        (dw, db), dx = nn.conv_backward(layer32, x.astype(np.float32), up.astype(np.float32))
        ref = layer32.astype(np.float64)
        x64 = x.astype(np.float32).astype(np.float64)

        def f():
            return float(np.sum(nn.conv_forward(ref, x64) * up))

        worst = max(worst, rel(dw, fd_grad(f, ref.weights, 1e-4)), rel(db, fd_grad(f, ref.bias, 1e-4)),
                    rel(dx, fd_grad(f, x64, 1e-4)))
    assert worst <= 1e-3


def test_conv_backward_without_input_grad():
    rng = np.random.default_rng(0)
    layer = nn.init_conv(rng, 2, 3)
    x = rng.normal(size=(1, 4, 4, 2))
    _, dx = nn.conv_backward(layer, x, np.ones((1, 4, 4, 3)), input_grad=False)
    assert dx is None


# -- activations / resampling ----------------------------------------------------------------

def test_sigmoid_zero_and_saturation():
    assert np.all(nn.sigmoid(np.zeros(5)) == 0.5)
    assert abs(nn.sigmoid(np.array(20.0)) - 1) <= 1e-8
    assert np.all(np.isfinite(nn.sigmoid(np.array([-1e4, 1e4]))))


def test_sigmoid_scalar_oracle():
    x = np.random.default_rng(0).normal(scale=5, size=200)
    want = np.array([1 / (1 + math.exp(-v)) for v in x])
    np.testing.assert_allclose(nn.sigmoid(x), want, rtol=1e-12)


def test_activation_backwards_fd():
    rng = np.random.default_rng(1)
    x = rng.normal(size=50)
    up = rng.normal(size=50)
    y = nn.sigmoid(x)
    h = 1e-6
    np.testing.assert_allclose(nn.sigmoid_backward(y, up),
                               up * (nn.sigmoid(x + h) - nn.sigmoid(x - h)) / (2 * h), rtol=1e-6)
    x = x[np.abs(x) > 1e-3]
    up = up[:len(x)]
    np.testing.assert_allclose(nn.relu_backward(x, up), up * (x > 0))


def test_upsample_adjoint():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 4, 5))
    g = rng.normal(size=(2, 6, 8, 5))
    up = nn.upsample2(x)
    assert up.shape == (2, 6, 8, 5)
    assert np.isclose(np.sum(up * g), np.sum(x * nn.upsample2_backward(g)))


# -- loss ---------------------------------------------------------------------------------

def test_l2_identical():
    x = np.random.default_rng(0).normal(size=(3, 4))
    loss, grad = nn.l2_loss(x, x.copy(), 20)
    assert loss == 0 and not grad.any()


def test_l2_hand_values():
    loss, grad = nn.l2_loss(np.array(1.0), np.array(0.0), 20.0)
    assert loss == 20.0 and grad == 40.0


def test_l2_shape_mismatch():
    with pytest.raises(ValueError):
        nn.l2_loss(np.zeros(3), np.zeros(4))


def test_l2_grad_fd():
    rng = np.random.default_rng(3)
    pred, target = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    _, grad = nn.l2_loss(pred, target, 20)
    np.testing.assert_allclose(grad, fd_grad(lambda: nn.l2_loss(pred, target, 20)[0], pred, 1e-6), rtol=1e-6)


# -- adam ------------------------------------------------------------------------------------

def test_adam_one_step():
    p = {"w": np.array([0.5])}
    st_ = nn.AdamState(lr=2e-3, beta1=0.0, beta2=0.99, eps=1e-15)
    nn.adam_step(p, {"w": np.array([1.0])}, st_)
    assert abs((p["w"][0] - 0.5) - (-2e-3)) <= 1e-9
    assert st_.step == 1


def test_adam_zero_grad():
    p = {"w": np.array([0.5, -1.0])}
    st_ = nn.AdamState()
    nn.adam_step(p, {"w": np.zeros(2)}, st_)
    np.testing.assert_array_equal(p["w"], [0.5, -1.0])
    assert st_.step == 1


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        nn.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, nn.AdamState())


def test_adam_beta1_zero_five_step_hand_sequence():
    grads = [1.0, -2.0, 0.5, 3.0, -0.25]
    lr, b2, eps = 2e-3, 0.99, 1e-15
    theta, v = 0.3, 0.0
    expected = []
    for t, g in enumerate(grads, 1):
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * g / (math.sqrt(v / (1 - b2 ** t)) + eps)
        expected.append(theta)
    p = {"w": np.array([0.3])}
    st_ = nn.AdamState(lr=lr, beta1=0.0, beta2=b2, eps=eps)
    got = []
    for g in grads:
        nn.adam_step(p, {"w": np.array([g])}, st_)
        got.append(float(p["w"][0]))
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-15)


def test_adam_groups_independent():
    p = {"a": np.ones(3), "b": np.ones(3)}
    sa, sb = nn.AdamState(eps=1e-15), nn.AdamState(eps=1e-8)
    nn.adam_step(p, {"a": np.full(3, 1e-9)}, sa)
    np.testing.assert_array_equal(p["b"], 1.0)
    nn.adam_step(p, {"b": np.full(3, 1e-9)}, sb)
    assert sa.step == 1 and sb.step == 1
    assert set(sa.m) == {"a"} and set(sb.m) == {"b"}
    # tiny gradients: eps=1e-15 still takes a full-size step, eps=1e-8 is damped
    assert p["a"][0] < p["b"][0]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=8))
def test_kernels_deterministic(values):
    x = np.array(values)[None, :]
    layer = nn.init_dense(np.random.default_rng(0), x.shape[1], 3)
    assert nn.dense_forward(layer, x).tobytes() == nn.dense_forward(layer, x).tobytes()
