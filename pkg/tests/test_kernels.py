import numpy as np
import pytest

from cycledepth import _kernels as K

pytestmark = pytest.mark.skipif(not K.HAS_NUMBA, reason="numba not importable")


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_agree(rng, dtype):
    tol = 1e-5 if dtype == np.float32 else 1e-12
    n, c, h, w = 2, 3, 6, 10
    xp = np.pad(rng.standard_normal((n, c, h, w)), ((0, 0), (0, 0), (1, 1), (1, 1))).astype(dtype)
    for stride in (1, 2):
        ho, wo = (h + 2 - 3) // stride + 1, (w + 2 - 3) // stride + 1
        a = K.NUMPY_KERNELS["im2col"](xp, 3, stride, ho, wo)
        b = K.NUMBA_KERNELS["im2col"](xp, 3, stride, ho, wo)
        assert np.array_equal(a, b)
        cols = rng.standard_normal(a.shape).astype(dtype)
        np.testing.assert_allclose(K.NUMPY_KERNELS["col2im"](cols, xp.shape, 3, stride, ho, wo),
                                   K.NUMBA_KERNELS["col2im"](cols, xp.shape, 3, stride, ho, wo), atol=tol)

    src = rng.random((n, c, h, w)).astype(dtype)
    disp = (rng.random((n, 1, h, w)) * 12).astype(dtype)  # some samples fall off the edge
    g = rng.standard_normal((n, c, h, w)).astype(dtype)
    for sign in (-1, 1):
        fa = K.NUMPY_KERNELS["warp_forward"](src, disp, sign)
        fb = K.NUMBA_KERNELS["warp_forward"](src, disp, sign)
        for x, y in zip(fa, fb):
            np.testing.assert_allclose(x, y, atol=tol)
        ba = K.NUMPY_KERNELS["warp_backward"](g, src, *fa[1:], sign)
        bb = K.NUMBA_KERNELS["warp_backward"](g, src, *fb[1:], sign)
        for x, y in zip(ba, bb):
            np.testing.assert_allclose(x, y, atol=tol)

    np.testing.assert_allclose(K.NUMPY_KERNELS["pool3_forward"](src), K.NUMBA_KERNELS["pool3_forward"](src), atol=tol)
    gp = rng.standard_normal((n, c, h - 2, w - 2)).astype(dtype)
    np.testing.assert_allclose(K.NUMPY_KERNELS["pool3_backward"](gp, src.shape),
                               K.NUMBA_KERNELS["pool3_backward"](gp, src.shape), atol=tol)


def test_selected_backend_matches_flag():
    import os
    expected = "numpy" if os.environ.get("CYCLEDEPTH_NUMBA", "1") == "0" else "numba"
    assert K.backend() == expected
