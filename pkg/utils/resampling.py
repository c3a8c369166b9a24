"""
Separable resampling and filtering expressed as dense 1D operator matrices.

An (H, W, C) image X is transformed as Ah @ X[..., c] @ Aw.T, so the adjoint
of every operator is its transpose. Sizes are desk-scale (hundreds of pixels),
which keeps the dense matrices small.

Resampling is centre-aligned: output pixel o of a size-n_out axis sits at
input coordinate (o + 0.5) * n_in / n_out - 0.5.
"""
from functools import lru_cache
from typing import Tuple

import numpy as np

CATMULL_ROM_A = -0.5


def catmull_rom(t: np.ndarray, a: float = CATMULL_ROM_A) -> np.ndarray:
    """Keys cubic kernel with a = -0.5 (Catmull-Rom)."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2 = t * t
    t3 = t2 * t
    near = (a + 2.0) * t3 - (a + 3.0) * t2 + 1.0
    far = a * t3 - 5.0 * a * t2 + 8.0 * a * t - 4.0 * a
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


@lru_cache(maxsize=64)
def _resize_matrix_cached(n_in: int, n_out: int) -> np.ndarray:
    ratio = n_in / n_out
    # downsampling stretches the kernel over `ratio` input pixels (area-correct prefilter)
    stretch = max(1.0, ratio)
    support = 2.0 * stretch
    mat = np.zeros((n_out, n_in))
    for o in range(n_out):
        centre = (o + 0.5) * ratio - 0.5
        lo = int(np.floor(centre - support))
        hi = int(np.ceil(centre + support))
        taps = np.arange(lo, hi + 1)
        weights = catmull_rom((taps - centre) / stretch)
        keep = weights != 0.0
        taps, weights = taps[keep], weights[keep]
        weights = weights / weights.sum()
        np.add.at(mat[o], np.clip(taps, 0, n_in - 1), weights)
    mat.setflags(write=False)
    return mat


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Edge-clamped Catmull-Rom resampling operator of shape (n_out, n_in)."""
    if n_in < 1 or n_out < 1:
        raise ValueError(f"Axis sizes must be positive, got {n_in} -> {n_out}")
    return _resize_matrix_cached(int(n_in), int(n_out))


def reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Symmetric (edge-repeating) reflection of arbitrary indices into [0, n)."""
    m = np.mod(idx, 2 * n)
    return np.where(m >= n, 2 * n - 1 - m, m)


@lru_cache(maxsize=64)
def _filter_matrix_cached(n: int, kernel: Tuple[float, ...]) -> np.ndarray:
    k = np.asarray(kernel)
    r = len(k) // 2
    mat = np.zeros((n, n))
    rows = np.arange(n)
    for t, w in enumerate(k):
        np.add.at(mat, (rows, reflect_index(rows + t - r, n)), w)
    mat.setflags(write=False)
    return mat


def filter_matrix(n: int, kernel: np.ndarray) -> np.ndarray:
    """Correlation with an odd-length kernel under symmetric padding, as an (n, n) matrix."""
    kernel = np.asarray(kernel, dtype=np.float64).reshape(-1)
    if kernel.size % 2 == 0:
        raise ValueError("Filter kernels must have odd length")
    return _filter_matrix_cached(int(n), tuple(kernel.tolist()))


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized 1D Gaussian window."""
    x = np.arange(size) - size // 2
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def apply_separable(data: np.ndarray, mat_h: np.ndarray, mat_w: np.ndarray) -> np.ndarray:
    """Apply row/column operators to an (H, W) or (H, W, C) array."""
    if data.ndim == 2:
        return mat_h @ data @ mat_w.T
    return np.einsum("oi,ijc,pj->opc", mat_h, data, mat_w)


def resize(data: np.ndarray, out_height: int, out_width: int) -> np.ndarray:
    """Catmull-Rom resize of an (H, W) or (H, W, C) array."""
    return apply_separable(data, resize_matrix(data.shape[0], out_height), resize_matrix(data.shape[1], out_width))


def gaussian_blur(data: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with symmetric borders; sigma in pixels."""
    if sigma <= 0:
        return np.array(data, dtype=np.float64, copy=True)
    size = 2 * int(np.ceil(3.0 * sigma)) + 1
    k = gaussian_kernel(size, sigma)
    return apply_separable(data, filter_matrix(data.shape[0], k), filter_matrix(data.shape[1], k))
