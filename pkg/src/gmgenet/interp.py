"""Separable (tri)linear interpolation on regular grids."""
from __future__ import annotations

import numpy as np


def interp_axis(arr: np.ndarray, axis: int, positions: np.ndarray) -> np.ndarray:
    """Sample ``arr`` along ``axis`` at fractional indices (clamped to the grid).

    Uses ``a + w * (b - a)`` so constant runs are reproduced exactly.
    """
    n = arr.shape[axis]
    pos = np.clip(np.asarray(positions, dtype=np.float64), 0.0, n - 1)
    if n == 1:
        return np.repeat(arr, len(pos), axis=axis)
    i0 = np.minimum(np.floor(pos).astype(np.intp), n - 2)
    w = pos - i0
    a = np.take(arr, i0, axis=axis)
    b = np.take(arr, i0 + 1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = len(pos)
    w = w.reshape(shape).astype(arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float64)
    return a + w * (b - a)


def aligned_positions(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned source indices for resizing ``n_in`` samples to ``n_out``."""
    if n_out == 1 or n_in == 1:
        return np.zeros(n_out)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def resize_trilinear(arr: np.ndarray, shape) -> np.ndarray:
    """Resize a 3-D array to ``shape`` (same axis order) with corner alignment."""
    out = arr
    for axis, n_out in enumerate(shape):
        n_in = out.shape[axis]
        if n_in != n_out:
            out = interp_axis(out, axis, aligned_positions(n_in, n_out))
    return out
