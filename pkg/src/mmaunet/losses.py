"""Differentiable fusion losses: reconstruction MSE, global-statistics SSIM,
structural loss, Sobel detail loss and the weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], dtype=np.float32)
SOBEL_Y = SOBEL_X.T.copy()
SOBEL_EPS = 1e-6


@dataclass(frozen=True)
class SsimParams:
    dynamic_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03

    @property
    def c1(self):
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self):
        return (self.k2 * self.dynamic_range) ** 2


def _same_shape(*xs):
    first = xs[0].shape
    for x in xs[1:]:
        if x.shape != first:
            raise DimensionError(f"shape mismatch: {first} vs {x.shape}")


def luminance(x):
    """ITU-R 601 luma of a ``[N,3,H,W]`` tensor; 1-channel input passes through."""
    if x.shape[1] == 1:
        return x
    if x.shape[1] != 3:
        raise DimensionError(f"luminance needs 1 or 3 channels, got {x.shape[1]}")
    w = Tensor(np.array(LUMA_WEIGHTS, dtype=x.dtype).reshape(1, 3, 1, 1))
    return T.tsum(T.mul(x, w), axis=1, keepdims=True)


def loss_mse(x, o):
    """Mean of squared differences over every element."""
    _same_shape(x, o)
    return T.mean(T.square(T.sub(x, o)))


def ssim_index(x, y, params=SsimParams()):
    """SSIM from whole-image statistics per (sample, channel), then averaged."""
    _same_shape(x, y)
    axes = (2, 3)
    mx = T.mean(x, axis=axes, keepdims=True)
    my = T.mean(y, axis=axes, keepdims=True)
    dx = T.sub(x, mx)
    dy = T.sub(y, my)
    vx = T.mean(T.square(dx), axis=axes, keepdims=True)
    vy = T.mean(T.square(dy), axis=axes, keepdims=True)
    cxy = T.mean(T.mul(dx, dy), axis=axes, keepdims=True)
    c1, c2 = params.c1, params.c2
    num = T.mul(T.add(T.scale(T.mul(mx, my), 2.0), c1), T.add(T.scale(cxy, 2.0), c2))
    den = T.mul(
        T.add(T.add(T.square(mx), T.square(my)), c1),
        T.add(T.add(vx, vy), c2),
    )
    return T.mean(T.div(num, den))


def loss_ssim(ir, vi, f, params=SsimParams()):
    """``(1 - SSIM(F, IR)) + (1 - SSIM(F, VI))``.

    A 1-channel IR is repeated across F's channels, as in the MSE term, so
    every fused channel is compared with it. (Comparing only luma(F) lets the
    network satisfy the IR term through the green channel alone.)
    """
    if ir.shape[0] != f.shape[0] or ir.shape[2:] != f.shape[2:]:
        raise DimensionError(f"IR {ir.shape} and fused {f.shape} differ spatially")
    _same_shape(vi, f)
    s_ir = ssim_index(f, broadcast_ir(ir, f.shape[1]), params)
    s_vi = ssim_index(f, vi, params)
    return T.sub(2.0, T.add(s_ir, s_vi))


def sobel_magnitude(x):
    """``sqrt(gx^2 + gy^2 + eps)`` of a 1-channel tensor (valid region only)."""
    if x.shape[1] != 1:
        raise DimensionError("sobel_magnitude expects a single channel")
    k = Tensor(np.stack([SOBEL_X, SOBEL_Y])[:, None].astype(x.dtype))
    g = T.conv2d(x, k)
    return T.sqrt(T.add(T.tsum(T.square(g), axis=1, keepdims=True), SOBEL_EPS))


def loss_det(ir, vi, f):
    """Mean squared gap between the fused gradient magnitude and the
    elementwise max of the source gradient magnitudes (on luminance)."""
    if not (ir.shape[2:] == vi.shape[2:] == f.shape[2:]):
        raise DimensionError("detail loss needs equal spatial shapes")
    g_f = sobel_magnitude(luminance(f))
    target = T.maximum(sobel_magnitude(luminance(ir)), sobel_magnitude(luminance(vi)))
    return T.mean(T.square(T.sub(g_f, target)))


def broadcast_ir(ir, channels=3):
    """Repeat a 1-channel IR tensor across ``channels``."""
    if ir.shape[1] == channels:
        return ir
    return T.mul(ir, Tensor(np.ones((1, channels, 1, 1), dtype=ir.dtype)))


def total_loss(ir, vi, f, alpha=10.0, beta=0.5, params=SsimParams(), parts=False):
    """``MSE((IR+VI)/2, F) + alpha * loss_ssim + beta * loss_det``.

    With ``parts=True`` returns ``(total, mse, ssim, det)``.
    """
    avg = T.scale(T.add(broadcast_ir(ir, vi.shape[1]), vi), 0.5)
    mse = loss_mse(avg, f)
    ssim = loss_ssim(ir, vi, f, params)
    det = loss_det(ir, vi, f)
    total = T.add(T.add(mse, T.scale(ssim, alpha)), T.scale(det, beta))
    if parts:
        return total, mse, ssim, det
    return total
