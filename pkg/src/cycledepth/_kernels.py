"""Hot inner loops, each in two flavours: numba ``@njit`` and plain numpy.

The numba path is used when numba imports cleanly and ``CYCLEDEPTH_NUMBA`` is
not set to ``0``. Both paths are deterministic; they agree to rounding but not
bitwise, so a single run must stick to one path (the choice is made once at
import time).
"""
import os

import numpy as np

try:
    from numba import njit
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("CYCLEDEPTH_NUMBA", "1") != "0"


# --------------------------------------------------------------------------
# numpy reference kernels
# --------------------------------------------------------------------------

def np_im2col(xp, k, stride, ho, wo):
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (n, c, ho, wo, k, k) -> (n, c, k, k, ho, wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, ho * wo)


def np_col2im(cols, padded_shape, k, stride, ho, wo):
    n, c, hp, wp = padded_shape
    cols = cols.reshape(n, c, k, k, ho, wo)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return out


def np_warp_forward(src, disp, sign):
    n, c, h, w = src.shape
    xs_raw = np.arange(w, dtype=disp.dtype) + sign * disp[:, 0]
    xs = np.clip(xs_raw, 0, w - 1)
    x0 = np.floor(xs).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    frac = xs - x0
    inside = (xs_raw >= 0) & (xs_raw <= w - 1)
    shape = (n, c, h, w)
    i0 = np.broadcast_to(x0[:, None], shape)
    i1 = np.broadcast_to(x1[:, None], shape)
    s0 = np.take_along_axis(src, i0, axis=3)
    s1 = np.take_along_axis(src, i1, axis=3)
    fr = frac[:, None]
    out = s0 * (1 - fr) + s1 * fr
    return out, x0, x1, frac, inside


def np_warp_backward(grad, src, x0, x1, frac, inside, sign):
    n, c, h, w = src.shape
    shape = (n, c, h, w)
    i0 = np.broadcast_to(x0[:, None], shape)
    i1 = np.broadcast_to(x1[:, None], shape)
    s0 = np.take_along_axis(src, i0, axis=3)
    s1 = np.take_along_axis(src, i1, axis=3)
    fr = frac[:, None]

    row_base = (np.arange(n * c * h, dtype=np.intp) * w).reshape(n, c, h, 1)
    flat0 = (row_base + i0).ravel()
    flat1 = (row_base + i1).ravel()
    size = n * c * h * w
    dsrc = np.bincount(flat0, weights=(grad * (1 - fr)).ravel(), minlength=size)
    dsrc += np.bincount(flat1, weights=(grad * fr).ravel(), minlength=size)
    dsrc = dsrc.reshape(shape).astype(src.dtype)

    ddisp = sign * (grad * (s1 - s0)).sum(axis=1) * inside
    return dsrc, ddisp[:, None].astype(src.dtype)


def np_pool3_forward(x):
    h, w = x.shape[2] - 2, x.shape[3] - 2
    out = np.zeros(x.shape[:2] + (h, w), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            out += x[:, :, i : i + h, j : j + w]
    return out / 9


def np_pool3_backward(grad, in_shape):
    h, w = grad.shape[2], grad.shape[3]
    out = np.zeros(in_shape, dtype=grad.dtype)
    g = grad / 9
    for i in range(3):
        for j in range(3):
            out[:, :, i : i + h, j : j + w] += g
    return out


# --------------------------------------------------------------------------
# numba kernels
# --------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def nb_im2col(xp, k, stride, ho, wo):
        n, c = xp.shape[0], xp.shape[1]
        cols = np.empty((n, c * k * k, ho * wo), dtype=xp.dtype)
        for b in range(n):
            for ch in range(c):
                for i in range(k):
                    for j in range(k):
                        row = (ch * k + i) * k + j
                        for y in range(ho):
                            yy = y * stride + i
                            for x in range(wo):
                                cols[b, row, y * wo + x] = xp[b, ch, yy, x * stride + j]
        return cols

    @njit(cache=True)
    def nb_col2im(cols, padded_shape, k, stride, ho, wo):
        n, c = padded_shape[0], padded_shape[1]
        out = np.zeros((n, c, padded_shape[2], padded_shape[3]), dtype=cols.dtype)
        for b in range(n):
            for ch in range(c):
                for i in range(k):
                    for j in range(k):
                        row = (ch * k + i) * k + j
                        for y in range(ho):
                            yy = y * stride + i
                            for x in range(wo):
                                out[b, ch, yy, x * stride + j] += cols[b, row, y * wo + x]
        return out

    @njit(cache=True)
    def _nb_warp_forward(src, disp, sign):
        n, c, h, w = src.shape
        out = np.empty_like(src)
        x0 = np.empty((n, h, w), dtype=np.intp)
        x1 = np.empty((n, h, w), dtype=np.intp)
        frac = np.empty((n, h, w), dtype=src.dtype)
        inside = np.empty((n, h, w), dtype=np.bool_)
        top = w - 1
        for b in range(n):
            for y in range(h):
                for x in range(w):
                    raw = x + sign * disp[b, 0, y, x]
                    inside[b, y, x] = raw >= 0 and raw <= top
                    xs = min(max(raw, 0.0), top)
                    lo = int(np.floor(xs))
                    hi = min(lo + 1, top)
                    f = xs - lo
                    x0[b, y, x] = lo
                    x1[b, y, x] = hi
                    frac[b, y, x] = f
                    for ch in range(c):
                        out[b, ch, y, x] = src[b, ch, y, lo] * (1 - f) + src[b, ch, y, hi] * f
        return out, x0, x1, frac, inside

    def nb_warp_forward(src, disp, sign):
        return _nb_warp_forward(src, disp, src.dtype.type(sign))

    @njit(cache=True)
    def _nb_warp_backward(grad, src, x0, x1, frac, inside, sign):
        n, c, h, w = src.shape
        dsrc = np.zeros_like(src)
        ddisp = np.zeros((n, 1, h, w), dtype=src.dtype)
        for b in range(n):
            for ch in range(c):
                for y in range(h):
                    for x in range(w):
                        g = grad[b, ch, y, x]
                        lo = x0[b, y, x]
                        hi = x1[b, y, x]
                        f = frac[b, y, x]
                        dsrc[b, ch, y, lo] += g * (1 - f)
                        dsrc[b, ch, y, hi] += g * f
                        if inside[b, y, x]:
                            ddisp[b, 0, y, x] += sign * g * (src[b, ch, y, hi] - src[b, ch, y, lo])
        return dsrc, ddisp

    def nb_warp_backward(grad, src, x0, x1, frac, inside, sign):
        return _nb_warp_backward(grad, src, x0, x1, frac, inside, src.dtype.type(sign))

    @njit(cache=True)
    def nb_pool3_forward(x):
        n, c = x.shape[0], x.shape[1]
        h, w = x.shape[2] - 2, x.shape[3] - 2
        out = np.empty((n, c, h, w), dtype=x.dtype)
        for b in range(n):
            for ch in range(c):
                for y in range(h):
                    for xx in range(w):
                        s = 0.0
                        for i in range(3):
                            for j in range(3):
                                s += x[b, ch, y + i, xx + j]
                        out[b, ch, y, xx] = s / 9
        return out

    @njit(cache=True)
    def nb_pool3_backward(grad, in_shape):
        n, c, h, w = grad.shape
        out = np.zeros((in_shape[0], in_shape[1], in_shape[2], in_shape[3]), dtype=grad.dtype)
        for b in range(n):
            for ch in range(c):
                for y in range(h):
                    for xx in range(w):
                        g = grad[b, ch, y, xx] / 9
                        for i in range(3):
                            for j in range(3):
                                out[b, ch, y + i, xx + j] += g
        return out


NUMPY_KERNELS = {
    "im2col": np_im2col,
    "col2im": np_col2im,
    "warp_forward": np_warp_forward,
    "warp_backward": np_warp_backward,
    "pool3_forward": np_pool3_forward,
    "pool3_backward": np_pool3_backward,
}

NUMBA_KERNELS = {}
if HAS_NUMBA:
    NUMBA_KERNELS = {
        "im2col": nb_im2col,
        "col2im": lambda cols, shape, k, s, ho, wo: nb_col2im(cols, tuple(shape), k, s, ho, wo),
        "warp_forward": nb_warp_forward,
        "warp_backward": nb_warp_backward,
        "pool3_forward": nb_pool3_forward,
        "pool3_backward": lambda g, shape: nb_pool3_backward(g, tuple(shape)),
    }

_active = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS

im2col = _active["im2col"]
col2im = _active["col2im"]
warp_forward = _active["warp_forward"]
warp_backward = _active["warp_backward"]
pool3_forward = _active["pool3_forward"]
pool3_backward = _active["pool3_backward"]


def backend():
    return "numba" if USE_NUMBA else "numpy"
