import os

import numpy as np
import pytest

from earlyloc.tensornn import kernels
from earlyloc.tensornn.kernels import available_backends, use_backend

BACKENDS = sorted(available_backends())


def naive_conv(x, w, b, stride):
    n, h, wd, cin = x.shape
    kh, kw, _, f = w.shape
    oh, ow = (h - kh) // stride + 1, (wd - kw) // stride + 1
    y = np.zeros((n, oh, ow, f), dtype=np.float64)
    for i in range(oh):
        for j in range(ow):
            patch = x[:, i * stride:i * stride + kh, j * stride:j * stride + kw, :]
            y[:, i, j, :] = np.tensordot(patch, w, axes=([1, 2, 3], [0, 1, 2]))
    return y + b


def naive_depthwise(x, w, b, stride):
    n, h, wd, c = x.shape
    kh, kw, _ = w.shape
    oh, ow = (h - kh) // stride + 1, (wd - kw) // stride + 1
    y = np.zeros((n, oh, ow, c))
    for i in range(oh):
        for j in range(ow):
            patch = x[:, i * stride:i * stride + kh, j * stride:j * stride + kw, :]
            y[:, i, j, :] = (patch * w).sum(axis=(1, 2))
    return y + b


def naive_maxpool(x, ph, pw, stride):
    n, h, wd, c = x.shape
    oh, ow = (h - ph) // stride + 1, (wd - pw) // stride + 1
    y = np.zeros((n, oh, ow, c))
    for i in range(oh):
        for j in range(ow):
            y[:, i, j, :] = x[:, i * stride:i * stride + ph, j * stride:j * stride + pw, :].max(axis=(1, 2))
    return y


def test_compiled_backend_is_built():
    assert "compiled" in available_backends()
    forced = os.environ.get("EARLYLOC_PURE_PYTHON", "") not in ("", "0")
    assert kernels.BACKEND == ("python" if forced else "compiled")


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_naive(backend, dtype, stride, rng):
    x = rng.standard_normal((3, 7, 6, 4)).astype(dtype)
    w = rng.standard_normal((2, 3, 4, 5)).astype(dtype)
    b = rng.standard_normal(5).astype(dtype)
    tol = 1e-5 if dtype == np.float32 else 1e-12
    with use_backend(backend) as k:
        y = k.conv2d_forward(x, w, b, stride)
    assert y.dtype == dtype
    np.testing.assert_allclose(y, naive_conv(x.astype(np.float64), w, b, stride), rtol=tol, atol=tol)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("stride", [1, 2])
def test_conv_backward_matches_autodiff_identity(backend, stride, rng):
    # <dy, conv(x)> is linear in x, w and b; gradients follow from adjoint identities
    x = rng.standard_normal((2, 6, 7, 3))
    w = rng.standard_normal((3, 2, 3, 4))
    b = np.zeros(4)
    with use_backend(backend) as k:
        y = k.conv2d_forward(x, w, b, stride)
        dy = rng.standard_normal(y.shape)
        dx, dw, db = k.conv2d_backward(x, w, dy, stride)
    dx2 = rng.standard_normal(x.shape)
    dw2 = rng.standard_normal(w.shape)
    lhs = np.sum(dy * naive_conv(dx2, w, b, stride))
    np.testing.assert_allclose(lhs, np.sum(dx * dx2), rtol=1e-10)
    lhs = np.sum(dy * naive_conv(x, dw2, b, stride))
    np.testing.assert_allclose(lhs, np.sum(dw * dw2), rtol=1e-10)
    np.testing.assert_allclose(db, dy.sum(axis=(0, 1, 2)), rtol=1e-12)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_agree_on_all_kernels(dtype, rng):
    if len(BACKENDS) < 2:
        pytest.skip("compiled backend not built")
    x = rng.standard_normal((4, 9, 8, 6)).astype(dtype)
    w = rng.standard_normal((2, 2, 6, 7)).astype(dtype)
    dw_w = rng.standard_normal((3, 2, 6)).astype(dtype)
    b = rng.standard_normal(7).astype(dtype)
    bd = rng.standard_normal(6).astype(dtype)
    tol = 2e-5 if dtype == np.float32 else 1e-12
    impls = available_backends()
    c, p = impls["compiled"], impls["python"]
    for stride in (1, 2):
        np.testing.assert_allclose(c.conv2d_forward(x, w, b, stride), p.conv2d_forward(x, w, b, stride),
                                   rtol=tol, atol=tol)
        dy = rng.standard_normal(c.conv2d_forward(x, w, b, stride).shape).astype(dtype)
        for a, e in zip(c.conv2d_backward(x, w, dy, stride), p.conv2d_backward(x, w, dy, stride)):
            np.testing.assert_allclose(a, e, rtol=tol * 10, atol=tol * 10)
        yd = c.depthwise_forward(x, dw_w, bd, stride)
        np.testing.assert_allclose(yd, p.depthwise_forward(x, dw_w, bd, stride), rtol=tol, atol=tol)
        dyd = rng.standard_normal(yd.shape).astype(dtype)
        for a, e in zip(c.depthwise_backward(x, dw_w, dyd, stride), p.depthwise_backward(x, dw_w, dyd, stride)):
            np.testing.assert_allclose(a, e, rtol=tol * 10, atol=tol * 10)
        ym, am = c.maxpool_forward(x, 2, 3, stride)
        yp, ap = p.maxpool_forward(x, 2, 3, stride)
        np.testing.assert_array_equal(ym, yp)
        np.testing.assert_array_equal(am, ap)
        dyp = rng.standard_normal(ym.shape).astype(dtype)
        np.testing.assert_allclose(c.maxpool_backward(dyp, am, 9, 8), p.maxpool_backward(dyp, ap, 9, 8),
                                   rtol=tol, atol=tol)


@pytest.mark.parametrize("backend", BACKENDS)
def test_depthwise_and_pool_match_naive(backend, rng):
    x = rng.standard_normal((2, 6, 5, 3))
    w = rng.standard_normal((2, 2, 3))
    b = rng.standard_normal(3)
    with use_backend(backend) as k:
        np.testing.assert_allclose(k.depthwise_forward(x, w, b, 1), naive_depthwise(x, w, b, 1), atol=1e-12)
        y, _ = k.maxpool_forward(x, 2, 2, 2)
    np.testing.assert_array_equal(y, naive_maxpool(x, 2, 2, 2))


@pytest.mark.parametrize("backend", BACKENDS)
def test_maxpool_ties_route_gradient_to_first_maximum(backend):
    x = np.ones((1, 2, 2, 1))
    with use_backend(backend) as k:
        y, arg = k.maxpool_forward(x, 2, 2, 2)
        dx = k.maxpool_backward(np.ones_like(y), arg, 2, 2)
    assert dx[0, :, :, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


@pytest.mark.parametrize("backend", BACKENDS)
def test_empty_batch(backend):
    x = np.zeros((0, 5, 5, 2), dtype=np.float32)
    w = np.ones((2, 2, 2, 3), dtype=np.float32)
    with use_backend(backend) as k:
        y = k.conv2d_forward(x, w, np.zeros(3, np.float32), 1)
        dx, dw, db = k.conv2d_backward(x, w, np.zeros((0, 4, 4, 3), np.float32), 1)
    assert y.shape == (0, 4, 4, 3)
    assert dx.shape == x.shape and not dw.any() and not db.any()


def test_large_batch_is_chunked_consistently(rng):
    # enough rows to exceed the compiled kernel's column budget
    x = rng.standard_normal((300, 30, 30, 4)).astype(np.float32)
    w = rng.standard_normal((2, 2, 4, 8)).astype(np.float32)
    b = np.zeros(8, np.float32)
    impls = available_backends()
    ys = [impls[name].conv2d_forward(x, w, b, 1) for name in BACKENDS]
    for y in ys[1:]:
        np.testing.assert_allclose(y, ys[0], rtol=1e-5, atol=1e-5)


def test_use_backend_restores_previous_binding():
    before = kernels.conv2d_forward
    with use_backend("python"):
        assert kernels.BACKEND == "python"
    assert kernels.conv2d_forward is before
    with pytest.raises(ValueError):
        with use_backend("fortran"):
            pass
