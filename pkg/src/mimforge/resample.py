"""Bilinear resampling of image-like grids."""

from __future__ import annotations

import numpy as np


def _bilinear_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Corner-aligned sampling: out[0] = in[0], out[-1] = in[-1].
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def bilinear_resize(grid: np.ndarray, out_rows: int, out_cols: int) -> np.ndarray:
    """Bilinearly resample an (r, c, ...) array to (out_rows, out_cols, ...)."""
    r, c = grid.shape[:2]
    if (r, c) == (out_rows, out_cols):
        return grid.copy()
    extra = (None,) * (grid.ndim - 2)
    rl, rh, rf = _bilinear_axis(r, out_rows)
    cl, ch, cf = _bilinear_axis(c, out_cols)
    top = grid[rl] * (1 - rf)[(slice(None), None) + extra] + grid[rh] * rf[(slice(None), None) + extra]
    out = top[:, cl] * (1 - cf)[(None, slice(None)) + extra] + top[:, ch] * cf[(None, slice(None)) + extra]
    return out


def resize_images(images: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of (B, H, W, C) images to size x size."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[1:3] == (size, size):
        return images
    moved = np.moveaxis(images, 0, 2)  # (H, W, B, C)
    return np.moveaxis(bilinear_resize(moved, size, size), 2, 0)
