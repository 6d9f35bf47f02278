"""Separable bilinear resampling with the sample-center convention."""
from __future__ import annotations

import numpy as np


def interp_matrix(n_out: int, n_in: int, start: float = 0.0, step: float = 1.0) -> np.ndarray:
    """Linear-interpolation weights mapping ``n_in`` samples to ``n_out``.

    Output sample ``j`` reads source coordinate ``start + (j + 0.5) * step - 0.5``,
    clamped to ``[0, n_in - 1]``.
    """
    src = start + (np.arange(n_out) + 0.5) * step - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def resample(grid: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Apply row/column interpolation matrices to an ``H x W x C`` grid."""
    h, w, c = grid.shape
    tmp = (rows @ grid.reshape(h, w * c)).reshape(rows.shape[0], w, c)
    return np.matmul(cols[None], tmp)


def resample_transpose(grad: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`resample` (pulls an output gradient back to the grid)."""
    H, W, c = grad.shape
    tmp = np.matmul(cols.T[None], grad)
    return (rows.T @ tmp.reshape(H, -1)).reshape(rows.shape[1], cols.shape[1], c)
