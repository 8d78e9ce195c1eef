"""Accelerated kernels agree with their plain numpy fallbacks."""

import numpy as np
import pytest

from tricodec import backend
from tricodec.tensor import kernels

pytestmark = pytest.mark.skipif(not backend.use_numba(),
                                reason="numba backend unavailable")

rng = np.random.default_rng(11)


def test_backend_selection_roundtrip():
    original = backend.active_backend()
    try:
        backend.set_backend("numpy")
        assert not backend.use_numba()
        backend.set_backend("numba")
        assert backend.use_numba()
        with pytest.raises(Exception):
            backend.set_backend("cuda")
    finally:
        backend.set_backend(original)


def test_conv2d_kernel_pair():
    x = rng.normal(size=(2, 3, 9, 8))
    w = rng.normal(size=(4, 3, 3, 2))
    args = (x, w, 2, 1, 1, 0)
    np.testing.assert_allclose(kernels.conv2d_fwd_nb(*args),
                               kernels.conv2d_fwd_np(*args), atol=1e-12)
    gy = rng.normal(size=kernels.conv2d_fwd_np(*args).shape)
    np.testing.assert_allclose(
        kernels.conv2d_bwd_input_nb(gy, w, 2, 1, 1, 0, 9, 8),
        kernels.conv2d_bwd_input_np(gy, w, 2, 1, 1, 0, 9, 8), atol=1e-12)
    np.testing.assert_allclose(
        kernels.conv2d_bwd_weight_nb(gy, x, 2, 1, 1, 0, 3, 2),
        kernels.conv2d_bwd_weight_np(gy, x, 2, 1, 1, 0, 3, 2), atol=1e-12)


def test_conv3d_kernel_pair():
    x = rng.normal(size=(1, 2, 6, 6, 6))
    w = rng.normal(size=(3, 2, 2, 2, 2))
    args = (x, w, 2, 2, 2)
    np.testing.assert_allclose(kernels.conv3d_fwd_nb(*args),
                               kernels.conv3d_fwd_np(*args), atol=1e-12)
    gy = rng.normal(size=kernels.conv3d_fwd_np(*args).shape)
    np.testing.assert_allclose(
        kernels.conv3d_bwd_input_nb(gy, w, 2, 2, 2, 6, 6, 6),
        kernels.conv3d_bwd_input_np(gy, w, 2, 2, 2, 6, 6, 6), atol=1e-12)
    np.testing.assert_allclose(
        kernels.conv3d_bwd_weight_nb(gy, x, 2, 2, 2, 2, 2, 2),
        kernels.conv3d_bwd_weight_np(gy, x, 2, 2, 2, 2, 2, 2), atol=1e-12)


def test_splat_kernel_pair():
    n, m, c = 40, 27, 5
    idx = rng.integers(0, m, size=(n, 8))
    wts = rng.random((n, 8))
    feats = rng.normal(size=(n, c))
    out_nb, ws_nb = kernels.splat_fwd_nb(idx, wts, feats, m)
    out_np, ws_np = kernels.splat_fwd_np(idx, wts, feats, m)
    np.testing.assert_allclose(out_nb, out_np, atol=1e-12)
    np.testing.assert_allclose(ws_nb, ws_np, atol=1e-12)
    gout = rng.normal(size=(m, c))
    np.testing.assert_allclose(kernels.splat_bwd_feats_nb(idx, wts, gout),
                               kernels.splat_bwd_feats_np(idx, wts, gout),
                               atol=1e-12)


def test_raster_assign_kernel_pair():
    verts = rng.uniform(-0.9, 0.9, size=(12, 3))
    faces = rng.integers(0, 12, size=(8, 3)).astype(np.int64)
    xy = (verts[:, :2] + 1.0) * 12.0
    z = verts[:, 2] + 3.0
    out_nb = kernels.raster_assign_nb(xy, z, faces, 24, 24, 0.1, 10.0)
    out_np = kernels.raster_assign_np(xy, z, faces, 24, 24, 0.1, 10.0)
    for a, b in zip(out_nb, out_np):
        np.testing.assert_allclose(a, b, atol=1e-12)
