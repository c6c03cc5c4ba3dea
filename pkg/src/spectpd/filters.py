"""Separable Gaussian smoothing and trilinear resizing on dense grids."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import convolve1d

from .errors import ShapeError

# FWHM = 2*sqrt(2*ln 2) * sigma
FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


def gaussian_kernel_1d(sigma_vox: float) -> np.ndarray:
    """Sampled Gaussian, truncated at 4 sigma, normalized to unit sum."""
    if sigma_vox <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma_vox}")
    radius = max(1, int(math.ceil(4.0 * sigma_vox)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma_vox) ** 2)
    return k / k.sum()


def gaussian_smooth(data: np.ndarray, fwhm_mm: float, voxel_mm) -> np.ndarray:
    """Separable 3D Gaussian filter with edge renormalization.

    The kernel has unit sum, so constant fields pass through unchanged; near
    the boundary the response is divided by the smoothed indicator so the
    renormalized kernel still sums to one over the grid.
    """
    if fwhm_mm <= 0:
        raise ValueError(f"fwhm must be > 0, got {fwhm_mm}")
    if data.ndim != 3:
        raise ShapeError(f"expected a 3D field, got {data.ndim}D")
    sigma_mm = fwhm_mm / FWHM_PER_SIGMA
    out = np.asarray(data, dtype=np.float64)
    norm = np.ones_like(out)
    for axis, v in enumerate(voxel_mm):
        k = gaussian_kernel_1d(sigma_mm / float(v))
        out = convolve1d(out, k, axis=axis, mode="constant", cval=0.0)
        norm = convolve1d(norm, k, axis=axis, mode="constant", cval=0.0)
    return out / norm


def _interp_axis(a: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = a.shape[axis]
    if n_out == n_in:
        return a
    if n_in == 1:
        reps = [1] * a.ndim
        reps[axis] = n_out
        return np.tile(a, reps)
    if n_out == 1:
        pos = np.array([0.5 * (n_in - 1)])
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    w = pos - lo
    shape = [1] * a.ndim
    shape[axis] = n_out
    w = w.reshape(shape)
    return np.take(a, lo, axis=axis) * (1.0 - w) + np.take(a, hi, axis=axis) * w


def trilinear_resize(data: np.ndarray, out_extents) -> np.ndarray:
    """Resize a 3D field by corner-aligned linear interpolation per axis."""
    if data.ndim != 3:
        raise ShapeError(f"expected a 3D field, got {data.ndim}D")
    out = np.asarray(data, dtype=np.float64)
    for axis, n in enumerate(out_extents):
        out = _interp_axis(out, axis, int(n))
    return out


def nearest_resize(data: np.ndarray, out_extents) -> np.ndarray:
    """Nearest-neighbor resize with the same corner-aligned index mapping."""
    if data.ndim != 3:
        raise ShapeError(f"expected a 3D field, got {data.ndim}D")
    out = np.asarray(data)
    for axis, n_out in enumerate(out_extents):
        n_in = out.shape[axis]
        if n_in == n_out:
            continue
        if n_in == 1 or n_out == 1:
            idx = np.zeros(int(n_out), dtype=np.int64)
        else:
            idx = np.rint(np.arange(n_out) * (n_in - 1) / (n_out - 1)).astype(np.int64)
        out = np.take(out, idx, axis=axis)
    return out
