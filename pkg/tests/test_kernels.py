"""The compiled loop of every kernel agrees with its numpy twin."""
import numpy as np
import pytest

from depthup.kernels import HAS_NUMBA, Kernel, _backend
from depthup.kernels import calib as kc
from depthup.kernels import conv as kv
from depthup.kernels import flow as kf

pytestmark = pytest.mark.skipif(not HAS_NUMBA, reason="numba not installed")

rng = np.random.default_rng(7)


def both(k: Kernel, *args):
    return k.numba(*args), k.numpy(*args)


def test_every_kernel_has_a_twin():
    found = {name for mod in (kc, kv, kf) for name, obj in vars(mod).items() if isinstance(obj, Kernel)}
    assert found == {"im2col", "col2im", "depthwise", "depthwise_grad_input", "depthwise_grad_kernel",
                     "maxpool", "maxpool_grad", "correlate_sep", "bilinear", "update_matrices",
                     "warp_nearest", "zbuffer"}


def test_parallel_build_matches_sequential():
    xp = rng.standard_normal((2, 8, 9, 4))
    k = rng.standard_normal((3, 3, 4))
    np.testing.assert_array_equal(kv.depthwise.numba_parallel(xp, k, 6, 7), kv.depthwise.numba(xp, k, 6, 7))


@pytest.mark.parametrize("stride", [1, 2])
def test_im2col_col2im(stride):
    xp = rng.standard_normal((2, 9, 8, 3))
    oh, ow = (9 - 3) // stride + 1, (8 - 3) // stride + 1
    a, b = both(kv.im2col, xp, 3, 3, stride, oh, ow)
    np.testing.assert_array_equal(a, b)
    a, b = both(kv.col2im, a, 9, 8, stride)
    np.testing.assert_allclose(a, b, rtol=1e-14, atol=1e-14)


def test_depthwise_family():
    xp = rng.standard_normal((2, 8, 9, 4))
    k = rng.standard_normal((3, 3, 4))
    a, b = both(kv.depthwise, xp, k, 6, 7)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)
    g = rng.standard_normal((2, 6, 7, 4))
    a, b = both(kv.depthwise_grad_input, g, k, 8, 9)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)
    a, b = both(kv.depthwise_grad_kernel, xp, g, 3, 3)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_maxpool_family_including_ties():
    x = rng.integers(0, 3, (2, 7, 8, 3)).astype(np.float64)  # many ties
    (ya, aa), (yb, ab) = both(kv.maxpool, x)
    np.testing.assert_array_equal(ya, yb)
    np.testing.assert_array_equal(aa, ab)
    g = rng.standard_normal(ya.shape)
    a, b = both(kv.maxpool_grad, g, aa, 7, 8)
    np.testing.assert_array_equal(a, b)


def test_flow_kernels():
    img = rng.random((20, 25))
    kx, ky = rng.random(7), rng.random(5)
    a, b = both(kf.correlate_sep, img, kx, ky)
    np.testing.assert_allclose(a, b, rtol=1e-13)
    field = rng.random((20, 25, 5))
    px = rng.uniform(-3, 28, (10, 12))
    py = rng.uniform(-3, 23, (10, 12))
    a, b = both(kf.bilinear, field, px, py)
    np.testing.assert_allclose(a, b, rtol=1e-13)
    r0, r1 = rng.standard_normal((20, 25, 5)), rng.standard_normal((20, 25, 5))
    flow = rng.uniform(-4, 4, (20, 25, 2))
    a, b = both(kf.update_matrices, r0, r1, flow)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_warp_and_zbuffer():
    depth = rng.integers(0, 5, (12, 15)).astype(np.uint16)
    flow = rng.uniform(-3, 3, (12, 15, 2))
    (da, ma), (db, mb) = both(kf.warp_nearest, depth, depth != 0, flow)
    np.testing.assert_array_equal(da, db)
    np.testing.assert_array_equal(ma, mb)
    u = rng.integers(-2, 12, 200)
    v = rng.integers(-2, 9, 200)
    z = rng.uniform(-1, 5, 200)
    a, b = both(kc.zbuffer, u, v, z, 8, 10)
    np.testing.assert_array_equal(a, b)


def test_dispatch_follows_backend(monkeypatch):
    calls = []
    k = Kernel(lambda x: x + 1, lambda x: calls.append(x) or x + 1)
    monkeypatch.setattr(_backend, "BACKEND", "numpy")
    assert k(1) == 2 and calls == [1]
