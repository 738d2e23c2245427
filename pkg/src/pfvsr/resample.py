"""Separable image resampling: Gaussian blur and bicubic interpolation.

Both are realized as explicit 1-D operator matrices applied along each
spatial axis through ``tensor.separable_transform``, so the backward pass is
the exact adjoint and boundary handling lives in the matrix construction.
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError, Tensor, separable_transform


def gaussian_kernel(sigma, radius=None):
    """Normalized 1-D Gaussian taps; radius defaults to ceil(3*sigma)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if radius is None:
        radius = math.ceil(3.0 * sigma)
    radius = int(radius)
    if radius < 1:
        raise ValueError(f"kernel radius must be >= 1, got {radius}")
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(offsets ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def _reflect_index(i, n):
    # mirror about the edge samples without repeating them: -1 -> 1, n -> n-2
    if n == 1:
        return 0
    period = 2 * n - 2
    i = i % period
    return period - i if i >= n else i


def blur_matrix(n, kernel):
    """(n, n) operator: correlate with ``kernel`` under reflected borders."""
    radius = (len(kernel) - 1) // 2
    mat = np.zeros((n, n), dtype=np.float64)
    for out in range(n):
        for tap in range(-radius, radius + 1):
            mat[out, _reflect_index(out + tap, n)] += kernel[tap + radius]
    return mat


def gaussian_blur(x, sigma=1.6, radius=None):
    """Blur both spatial axes with a reflected-border Gaussian."""
    k = gaussian_kernel(sigma, radius)
    rows = blur_matrix(x.shape[2], k)
    cols = blur_matrix(x.shape[3], k)
    return separable_transform(x, rows, cols)


def cubic_weight(t, a=-0.5):
    """Keys cubic interpolation kernel."""
    t = abs(t)
    if t <= 1.0:
        return (a + 2.0) * t ** 3 - (a + 3.0) * t ** 2 + 1.0
    if t < 2.0:
        return a * t ** 3 - 5.0 * a * t ** 2 + 8.0 * a * t - 4.0 * a
    return 0.0


def bicubic_matrix(n_in, factor):
    """(n_in * factor, n_in) cubic upsampling operator, edge replicate.

    Output sample centers follow the half-pixel convention
    ``src = (out + 0.5) / factor - 0.5``, so factor 1 is the identity.
    """
    n_out = n_in * factor
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for out in range(n_out):
        src = (out + 0.5) / factor - 0.5
        base = math.floor(src)
        frac = src - base
        for m in range(-1, 3):
            w = cubic_weight(frac - m)
            if w != 0.0:
                mat[out, min(max(base + m, 0), n_in - 1)] += w
    return mat


def bicubic_upsample(x, factor):
    """Upscale both spatial axes by an integer factor with Keys cubic taps."""
    f = int(factor)
    if f < 1:
        raise ValueError(f"upsample factor must be >= 1, got {f}")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError("height", f"cannot upsample empty frame {x.shape}")
    rows = bicubic_matrix(x.shape[2], f)
    cols = bicubic_matrix(x.shape[3], f)
    return separable_transform(x, rows, cols)


def bicubic_upsample_array(arr, factor):
    """Array-in/array-out convenience for non-autodiff callers."""
    return bicubic_upsample(Tensor(arr), factor).data
