"""Horizontal disparity warping with bilinear sampling.

Sign convention (rectified stereo): a scene point at column ``x`` of the left
image sits at ``x - d`` in the right image. So the left view is synthesized by
sampling the right image at ``x - d`` and the right view by sampling the left
image at ``x + d``. Sample coordinates are clamped to ``[0, W-1]``; the clamp
is treated as locally constant, i.e. clamped pixels pass no gradient to the
disparity.

Disparity maps at every scale hold values in full-resolution pixels.
"""
from enum import Enum

import numpy as np

from . import _kernels
from .autodiff import Tensor, _result, upsample_nearest


class WarpDirection(Enum):
    SYNTHESIZE_LEFT = "synthesize_left"
    SYNTHESIZE_RIGHT = "synthesize_right"

    @property
    def sign(self) -> int:
        return -1 if self is WarpDirection.SYNTHESIZE_LEFT else 1


SYNTHESIZE_LEFT = WarpDirection.SYNTHESIZE_LEFT
SYNTHESIZE_RIGHT = WarpDirection.SYNTHESIZE_RIGHT


def warp(disparity: Tensor, source: Tensor, direction) -> Tensor:
    """Resample ``source`` along rows at ``x -/+ disparity``.

    ``disparity`` is ``(N, 1, H, W)`` on the output grid, ``source`` is
    ``(N, C, H, W)``. Differentiable in both arguments.
    """
    direction = WarpDirection(direction)
    d, src = disparity.data, source.data
    if d.ndim != 4 or src.ndim != 4 or d.shape[1] != 1:
        raise ValueError(f"warp: expected (N,1,H,W) disparity and (N,C,H,W) source, "
                         f"got {d.shape} and {src.shape}")
    if (d.shape[0], d.shape[2], d.shape[3]) != (src.shape[0], src.shape[2], src.shape[3]):
        raise ValueError(f"warp: disparity {d.shape} and source {src.shape} differ in N, H or W")
    if d.size and d.min() < 0:
        raise ValueError(f"warp: negative disparity {float(d.min())}")
    if d.dtype != src.dtype:
        d = d.astype(src.dtype)

    sign = direction.sign
    src = np.ascontiguousarray(src)
    out, x0, x1, frac, inside = _kernels.warp_forward(src, np.ascontiguousarray(d), sign)

    def _backward(g):
        dsrc, ddisp = _kernels.warp_backward(np.ascontiguousarray(g), src, x0, x1, frac, inside, sign)
        return ddisp.astype(disparity.dtype, copy=False), dsrc

    return _result(out, (disparity, source), _backward)


def upsample_disparity_full(disparity: Tensor, scale: int) -> Tensor:
    """Nearest-neighbour upsampling of a scale-``n`` map to full resolution.

    Values are left untouched because they are already in full-resolution
    pixels.
    """
    if scale < 0:
        raise ValueError(f"scale must be >= 0, got {scale}")
    return upsample_nearest(disparity, 2 ** scale)


def to_scale_units(disparity: Tensor, scale: int) -> Tensor:
    """Express a full-resolution-unit disparity in pixels of the scale-``n`` grid."""
    return disparity if scale == 0 else disparity * (1.0 / 2 ** scale)


def area_downsample(image: np.ndarray, scale: int) -> np.ndarray:
    """2x2 box averaging applied ``scale`` times (plain array, no graph)."""
    out = image
    for _ in range(scale):
        n, c, h, w = out.shape
        if h % 2 or w % 2:
            raise ValueError(f"area_downsample: odd spatial size {out.shape}")
        out = out.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5), dtype=out.dtype)
    return out


def area_downsample_op(image: Tensor, scale: int) -> Tensor:
    """Differentiable version of :func:`area_downsample`."""
    out = image
    for _ in range(scale):
        out = _halve(out)
    return out


def _halve(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"area_downsample: odd spatial size {x.shape}")
    quarter = x.dtype.type(0.25)
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)) * quarter

    def _backward(g):
        return (np.repeat(np.repeat(g * quarter, 2, axis=2), 2, axis=3),)

    return _result(out, (x,), _backward)
