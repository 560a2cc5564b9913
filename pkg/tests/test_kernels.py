"""Compiled kernels must agree exactly with the numpy fallbacks."""
import numpy as np
import pytest

from fovgen import kernels


requires_compiled = pytest.mark.skipif(
    not kernels.HAVE_COMPILED, reason="compiled extension not built"
)


@requires_compiled
@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("shape", [(2, 3, 8, 8), (1, 4, 9, 7), (3, 1, 5, 5)])
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_im2col_matches_fallback(shape, stride, dtype, rng):
    x = rng.standard_normal(shape).astype(dtype)
    a = np.array(kernels.im2col(x, 3, 3, stride, 1))
    b = kernels._im2col_np(x, 3, 3, stride, 1)
    assert np.array_equal(a, b)


@requires_compiled
@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("k,pad", [(3, 1), (1, 0)])
def test_col2im_matches_fallback(stride, k, pad, rng):
    x_shape = (2, 3, 8, 8)
    oh = kernels.conv_out_size(8, k, stride, pad)
    cols = rng.standard_normal((2, 3 * k * k, oh * oh)).astype(np.float64)
    a = kernels.col2im(cols, x_shape, k, k, stride, pad)
    b = kernels._col2im_np(cols, x_shape, k, k, stride, pad)
    assert np.allclose(a, b, atol=1e-12)


def test_col2im_is_adjoint_of_im2col(rng):
    """<im2col(x), c> == <x, col2im(c)> for random x, c (exact adjointness)."""
    x = rng.standard_normal((2, 3, 6, 6))
    cols = kernels._im2col_np(x, 3, 3, 1, 1)
    c = rng.standard_normal(cols.shape)
    lhs = float((cols * c).sum())
    rhs = float((x * kernels._col2im_np(c, x.shape, 3, 3, 1, 1)).sum())
    assert abs(lhs - rhs) < 1e-9


def test_scratch_reuses_buffers():
    a = kernels.scratch(("t", 4, 4), np.float32)
    b = kernels.scratch(("t", 4, 4), np.float32)
    assert a is b
    c = kernels.scratch(("other", 4, 4), np.float32, zero=True)
    assert c is not a and not c.any()
