"""Primitive-level checks: every backward pass against central finite
differences, plus naive-loop oracles for the convolution layouts."""

import numpy as np
import pytest

from bytesgan import ops

rng = np.random.default_rng(42)


def probe_scalar(forward, probe):
    return lambda *args: float((forward(*args) * probe).sum())


def assert_grad(analytic, numeric, tol=1e-6):
    assert ops.relative_error(analytic, numeric) < tol


def test_dense_gradients():
    x = rng.standard_normal((4, 6))
    w = rng.standard_normal((6, 5))
    b = rng.standard_normal(5)
    probe = rng.standard_normal((4, 5))
    dx, dw, db = ops.dense_backward(x, w, probe)
    f = lambda xx: float((ops.dense(xx, w, b) * probe).sum())
    assert_grad(dx, ops.numerical_gradient(f, x.copy()))
    f = lambda ww: float((ops.dense(x, ww, b) * probe).sum())
    assert_grad(dw, ops.numerical_gradient(f, w.copy()))
    f = lambda bb: float((ops.dense(x, w, bb) * probe).sum())
    assert_grad(db, ops.numerical_gradient(f, b.copy()))


@pytest.mark.parametrize("shape,kshape,stride,path", [
    ((2, 5, 7, 2), (3, 3, 2, 4), 2, "im2col"),    # small footprint
    ((2, 5, 7, 8), (3, 3, 8, 4), 2, "strided"),   # per-tap path
    ((2, 6, 8, 3), (5, 5, 3, 2), 1, "flat"),      # tap-plane path
])
def test_conv2d_gradients_all_paths(shape, kshape, stride, path):
    x = rng.standard_normal(shape)
    w = rng.standard_normal(kshape)
    b = rng.standard_normal(kshape[-1])
    y, cache = ops.conv2d(x, w, b, stride)
    assert cache[0] == path
    probe = rng.standard_normal(y.shape)
    dx, dw, db = ops.conv2d_backward(w, cache, probe)
    f = lambda xx: float((ops.conv2d(xx, w, b, stride)[0] * probe).sum())
    assert_grad(dx, ops.numerical_gradient(f, x.copy()))
    f = lambda ww: float((ops.conv2d(x, ww, b, stride)[0] * probe).sum())
    assert_grad(dw, ops.numerical_gradient(f, w.copy()))
    f = lambda bb: float((ops.conv2d(x, w, bb, stride)[0] * probe).sum())
    assert_grad(db, ops.numerical_gradient(f, b.copy()))


def conv2d_same_naive(x, w, b, stride):
    bsz, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    out_h = -(-h // stride)
    out_w = -(-wd // stride)
    ph = max((out_h - 1) * stride + kh - h, 0)
    pw = max((out_w - 1) * stride + kw - wd, 0)
    xp = np.pad(x, ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0)))
    y = np.zeros((bsz, out_h, out_w, cout))
    for bi in range(bsz):
        for i in range(out_h):
            for j in range(out_w):
                patch = xp[bi, i * stride:i * stride + kh, j * stride:j * stride + kw, :]
                for o in range(cout):
                    y[bi, i, j, o] = b[o] + float((patch * w[:, :, :, o]).sum())
    return y


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_matches_naive(stride):
    x = rng.standard_normal((2, 6, 9, 3))
    w = rng.standard_normal((3, 3, 3, 4))
    b = rng.standard_normal(4)
    y, _ = ops.conv2d(x, w, b, stride)
    assert np.allclose(y, conv2d_same_naive(x, w, b, stride), atol=1e-10)


def test_conv_transpose2d_shape_and_gradients():
    x = rng.standard_normal((2, 3, 5, 4))
    w = rng.standard_normal((4, 4, 4, 3))
    b = rng.standard_normal(3)
    y, cache = ops.conv_transpose2d(x, w, b, 2)
    assert y.shape == (2, 6, 10, 3)
    probe = rng.standard_normal(y.shape)
    dx, dw, db = ops.conv_transpose2d_backward(w, cache, probe)
    f = lambda xx: float((ops.conv_transpose2d(xx, w, b, 2)[0] * probe).sum())
    assert_grad(dx, ops.numerical_gradient(f, x.copy()))
    f = lambda ww: float((ops.conv_transpose2d(x, ww, b, 2)[0] * probe).sum())
    assert_grad(dw, ops.numerical_gradient(f, w.copy()))
    f = lambda bb: float((ops.conv_transpose2d(x, w, bb, 2)[0] * probe).sum())
    assert_grad(db, ops.numerical_gradient(f, b.copy()))


def test_conv_transpose2d_matches_scatter_oracle():
    x = rng.standard_normal((1, 3, 4, 2))
    w = rng.standard_normal((4, 4, 2, 3))
    b = np.zeros(3)
    stride = 2
    full = np.zeros((1, 2 * 2 + 4, 3 * 2 + 4, 3))
    for i in range(3):
        for j in range(4):
            for c in range(2):
                full[0, i * stride:i * stride + 4, j * stride:j * stride + 4, :] += \
                    x[0, i, j, c] * w[:, :, c, :]
    crop = (4 - stride) // 2
    expect = full[:, crop:crop + 6, crop:crop + 8, :]
    y, _ = ops.conv_transpose2d(x, w, b, stride)
    assert np.allclose(y, expect, atol=1e-10)


def test_conv1d_gradients_and_naive():
    x = rng.standard_normal((2, 3, 12))   # (Cin, B, L)
    w = rng.standard_normal((5, 4, 2))
    b = rng.standard_normal(4)
    y, cache = ops.conv1d(x, w, b)
    assert y.shape == (4, 3, 8)
    naive = np.zeros((4, 3, 8))
    for o in range(4):
        for bi in range(3):
            for j in range(8):
                naive[o, bi, j] = b[o] + sum(
                    w[d, o, c] * x[c, bi, j + d] for d in range(5) for c in range(2))
    assert np.allclose(y, naive, atol=1e-10)
    probe = rng.standard_normal(y.shape)
    dx, dw, db = ops.conv1d_backward(w, cache, probe)
    f = lambda xx: float((ops.conv1d(xx, w, b)[0] * probe).sum())
    assert_grad(dx, ops.numerical_gradient(f, x.copy()))
    f = lambda ww: float((ops.conv1d(x, ww, b)[0] * probe).sum())
    assert_grad(dw, ops.numerical_gradient(f, w.copy()))
    none_dx, dw2, _ = ops.conv1d_backward(w, cache, probe, need_dx=False)
    assert none_dx is None
    assert np.array_equal(dw, dw2)


def test_maxpool1d_gradient_and_tie_rule():
    x = rng.standard_normal((2, 3, 15))
    y, arg = ops.maxpool1d(x, 4)
    assert y.shape == (2, 3, 12)
    probe = rng.standard_normal(y.shape)
    dx = ops.maxpool1d_backward(arg, 15, probe)
    f = lambda xx: float((ops.maxpool1d(xx, 4)[0] * probe).sum())
    assert_grad(dx, ops.numerical_gradient(f, x.copy()), tol=1e-5)
    # leftmost tie wins, matching np.argmax
    t = np.array([[[1.0, 3.0, 3.0, 2.0, 3.0]]])
    _, arg = ops.maxpool1d(t, 3)
    assert arg.ravel().tolist() == [1, 1, 2]


@pytest.mark.parametrize("k", [2, 5, 9, 35])
def test_maxpool_kernels_agree_with_numpy_reference(k):
    rows = rng.standard_normal((6, 60))
    y_ref, arg_ref = ops._maxpool_rows_numpy(rows, k)
    y, arg = ops.maxpool1d(rows, k)
    assert np.array_equal(y, y_ref)
    assert np.array_equal(arg.astype(np.int64), arg_ref.astype(np.int64))


def test_activations_and_stable_heads():
    x = rng.standard_normal((3, 7)) * 3
    assert np.allclose(ops.softmax(x).sum(axis=1), 1.0)
    assert np.allclose(ops.log_softmax(x), np.log(ops.softmax(x)))
    assert np.allclose(ops.logsumexp(x), np.log(np.exp(x).sum(axis=1)))
    big = np.array([[1e4, 1e4 - 3.0], [-1e4, -1e4 + 1.0]])
    assert np.isfinite(ops.logsumexp(big)).all()
    assert np.isfinite(ops.softplus(big)).all()
    assert np.all(ops.sigmoid(np.array([-800.0, 0.0, 800.0])) == [0.0, 0.5, 1.0])
    lr = ops.leaky_relu(np.array([-2.0, 3.0]), 0.2)
    assert np.allclose(lr, [-0.4, 3.0])


def test_adam_update_matches_formula():
    p = rng.standard_normal(10)
    g = rng.standard_normal(10)
    m = np.zeros(10)
    v = np.zeros(10)
    c1, c2 = 0.5, 0.001
    np_, nm, nv = ops.adam_update(p, g, m, v, 0.01, 0.5, 0.999, 1e-8, c1, c2)
    m_ref = 0.5 * g
    v_ref = 0.001 * g * g
    step = 0.01 * (m_ref / c1) / (np.sqrt(v_ref / c2) + 1e-8)
    assert np.allclose(np_, p - step, atol=1e-12)
    assert np.allclose(nm, m_ref)
    assert np.allclose(nv, v_ref)


def test_rmsprop_update_matches_formula():
    p = rng.standard_normal(10)
    g = rng.standard_normal(10)
    v = np.ones(10) * 0.5
    np_, nv = ops.rmsprop_update(p, g, v, 0.01, 0.9, 1e-8)
    v_ref = 0.9 * 0.5 + 0.1 * g * g
    assert np.allclose(nv, v_ref, atol=1e-12)
    assert np.allclose(np_, p - 0.01 * g / (np.sqrt(v_ref) + 1e-8), atol=1e-12)
