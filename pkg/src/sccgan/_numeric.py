"""Small numpy kernels shared by the descriptor and the autodiff engine."""

from __future__ import annotations

import numpy as np


def gaussian_kernel1d(radius: int, sigma: float) -> np.ndarray:
    """Unit-sum 1-D Gaussian taps on ``-radius..radius`` (float64)."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (t / sigma) ** 2)
    return g / g.sum()


def gaussian_kernel2d(radius: int, sigma: float) -> np.ndarray:
    """Unit-sum 2-D Gaussian, the outer product of the 1-D taps."""
    g = gaussian_kernel1d(radius, sigma)
    return np.outer(g, g)


def clamp_index(n: int, shift: int, pad_before: int = 0, pad_after: int = 0) -> np.ndarray:
    """Source index of each output sample for an edge-clamped shift/pad along one axis.

    Output position ``k`` (``0 <= k < n + pad_before + pad_after``) reads input
    ``clip(k - pad_before + shift, 0, n - 1)``.
    """
    k = np.arange(-pad_before, n + pad_after) + shift
    return np.clip(k, 0, n - 1)


def separable_correlate(x: np.ndarray, k_rows: np.ndarray, k_cols: np.ndarray) -> np.ndarray:
    """'Valid' correlation of the last two axes with ``outer(k_rows, k_cols)``.

    Rows are filtered first, then columns; the tap order is fixed so the result
    is independent of threading.
    """
    k_rows = np.asarray(k_rows, dtype=x.dtype)
    k_cols = np.asarray(k_cols, dtype=x.dtype)
    kr, kc = len(k_rows), len(k_cols)
    h_out = x.shape[-2] - kr + 1
    w_out = x.shape[-1] - kc + 1
    if h_out < 1 or w_out < 1:
        raise ValueError("input smaller than kernel")
    tmp = k_rows[0] * x[..., 0:h_out, :]
    for i in range(1, kr):
        tmp = tmp + k_rows[i] * x[..., i:i + h_out, :]
    out = k_cols[0] * tmp[..., :, 0:w_out]
    for j in range(1, kc):
        out = out + k_cols[j] * tmp[..., :, j:j + w_out]
    return out


def separable_correlate_adjoint(g: np.ndarray, k_rows: np.ndarray, k_cols: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`separable_correlate` with respect to its input."""
    k_rows = np.asarray(k_rows, dtype=g.dtype)
    k_cols = np.asarray(k_cols, dtype=g.dtype)
    kr, kc = len(k_rows), len(k_cols)
    h_out, w_out = g.shape[-2], g.shape[-1]
    lead = g.shape[:-2]
    tmp = np.zeros(lead + (h_out, w_out + kc - 1), dtype=g.dtype)
    for j in range(kc):
        tmp[..., :, j:j + w_out] += k_cols[j] * g
    out = np.zeros(lead + (h_out + kr - 1, w_out + kc - 1), dtype=g.dtype)
    for i in range(kr):
        out[..., i:i + h_out, :] += k_rows[i] * tmp
    return out
