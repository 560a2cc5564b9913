"""Conv gather/scatter kernels: compiled extension with numpy fallback.

Layout is patch-major: cols (N, C*kh*kw, OH*OW), chosen so the conv GEMM
(w_mat @ cols[n]) needs no transposes and reshapes stay views.  The backend
is chosen once at import; set ``FOVGEN_KERNELS=numpy`` to force the fallback
(used by the parity tests and the benchmark).
"""
import os
import threading

import numpy as np

try:
    from fovgen import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_FORCED = os.environ.get("FOVGEN_KERNELS", "").lower()
HAVE_COMPILED = _ckernels is not None
BACKEND = "numpy" if (_FORCED == "numpy" or not HAVE_COMPILED) else "compiled"

_TLS = threading.local()


def scratch(shape, dtype, zero=False):
    """Thread-local reusable buffer; avoids page-fault churn on the large
    per-call cols/grad arrays.  Callers must not hold a scratch array across
    another scratch() request with the same (shape, dtype)."""
    pool = getattr(_TLS, "pool", None)
    if pool is None:
        pool = _TLS.pool = {}
    key = (shape, np.dtype(dtype).str)
    buf = pool.get(key)
    if buf is None:
        real_shape = tuple(s for s in shape if isinstance(s, int))
        buf = pool[key] = np.empty(real_shape, dtype=dtype)
    if zero:
        buf.fill(0)
    return buf


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col_np(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for ky in range(kh):
        for kx in range(kw):
            cols[:, :, ky, kx] = xp[:, :, ky : ky + stride * oh : stride, kx : kx + stride * ow : stride]
    # (N, C, kh, kw, OH, OW) is already laid out as (N, C*kh*kw, OH*OW)
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im_np(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    blocks = cols.reshape(n, c, kh, kw, oh, ow)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ky in range(kh):
        for kx in range(kw):
            xp[:, :, ky : ky + stride * oh : stride, kx : kx + stride * ow : stride] += blocks[:, :, ky, kx]
    if pad:
        return np.ascontiguousarray(xp[:, :, pad : pad + h, pad : pad + w])
    return xp


def im2col(x, kh, kw, stride=1, pad=0, slot="cols"):
    """x (N,C,H,W) -> patch matrix (N, C*kh*kw, OH*OW).

    The result lives in a thread-local scratch buffer (keyed by ``slot``);
    it is only valid until the next same-shape/same-slot call on this thread.
    """
    if BACKEND == "numpy":
        return _im2col_np(x, kh, kw, stride, pad)
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    out = scratch((slot, n, c * kh * kw, oh * ow), x.dtype)
    _ckernels.im2col(x, kh, kw, stride, pad, out)
    return out


def col2im(cols, x_shape, kh, kw, stride=1, pad=0):
    """Adjoint of im2col: scatter-add patch gradients back to (N,C,H,W)."""
    if BACKEND == "numpy":
        return _col2im_np(cols, x_shape, kh, kw, stride, pad)
    cols = np.ascontiguousarray(cols)
    out = np.zeros(x_shape, dtype=cols.dtype)
    _ckernels.col2im(cols, kh, kw, stride, pad, out)
    return out
