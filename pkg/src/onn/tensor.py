"""Patch-matrix (im2col) machinery for operational layers.

Tensors are plain float64 numpy arrays. Flattening is row-major everywhere,
so ``vec``, ``im2col`` and ``broadcast_weights`` agree on element order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PAD = -1  # index_map sentinel for zero-padded window positions


@dataclass(frozen=True)
class PatchMatrix:
    """Sliding windows of an image stacked as rows.

    ``values[i, j]`` is the j-th element (row-major within the window) of the
    window centred on output pixel i. ``index_map`` holds the flat source
    index of each entry, or ``PAD`` where the window hangs over the border.
    """

    values: np.ndarray
    index_map: np.ndarray
    source_shape: tuple[int, int]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def check_kernel(kernel) -> tuple[int, int]:
    m, n = (int(k) for k in kernel)
    if m < 1 or n < 1 or m % 2 == 0 or n % 2 == 0:
        raise ValueError(f"kernel extents must be odd and positive, got {(m, n)}")
    return m, n


def vec(t) -> np.ndarray:
    return np.asarray(t, dtype=np.float64).reshape(-1)


def vec_inverse(v, shape) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    shape = tuple(int(s) for s in shape)
    if v.size != int(np.prod(shape)):
        raise ValueError(f"cannot reshape {v.size} elements into {shape}")
    return v.reshape(shape)


def index_map(image_shape, kernel) -> np.ndarray:
    """Source-index matrix of shape (M*N, m*n) with ``PAD`` for border taps."""
    M, N = (int(s) for s in image_shape)
    m, n = check_kernel(kernel)
    if M < 1 or N < 1:
        raise ValueError("image must be non-empty")
    rows = np.arange(M)[:, None, None, None] + np.arange(m)[None, None, :, None] - m // 2
    cols = np.arange(N)[None, :, None, None] + np.arange(n)[None, None, None, :] - n // 2
    rows, cols = np.broadcast_arrays(rows, cols)
    valid = (rows >= 0) & (rows < M) & (cols >= 0) & (cols < N)
    idx = np.where(valid, rows * N + cols, PAD)
    return idx.reshape(M * N, m * n)


def im2col(y, kernel) -> PatchMatrix:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.size == 0:
        raise ValueError(f"expected a non-empty 2-D image, got shape {y.shape}")
    idx = index_map(y.shape, kernel)
    flat = y.reshape(-1)
    values = np.where(idx == PAD, 0.0, flat[np.where(idx == PAD, 0, idx)])
    return PatchMatrix(values, idx, y.shape)


def col2im_accumulate(grad, idx, target_shape) -> np.ndarray:
    """Adjoint of ``im2col``: scatter-add each entry into its source pixel."""
    grad = np.asarray(grad, dtype=np.float64)
    idx = np.asarray(idx)
    if grad.shape != idx.shape:
        raise ValueError(f"grad {grad.shape} and index map {idx.shape} differ")
    M, N = (int(s) for s in target_shape)
    keep = idx != PAD
    out = np.bincount(idx[keep], weights=grad[keep], minlength=M * N)
    if out.size != M * N:
        raise ValueError("index map points outside the target image")
    return out.reshape(M, N)


def broadcast_weights(w, rows: int) -> np.ndarray:
    """Matrix whose ``rows`` rows are all ``vec(w)``."""
    if rows < 1:
        raise ValueError("rows must be >= 1")
    return np.tile(vec(w), (int(rows), 1))


# Batched forms used on the training path. Layout is (B, P, A, K): batch,
# output pixel, input map, window tap, so that a row of taps for all input maps
# is contiguous and GEMM-ready.

def patches(x: np.ndarray, kernel) -> np.ndarray:
    """Batched im2col of ``x`` with shape (B, A, M, N) -> (B, M*N, A, m*n)."""
    m, n = check_kernel(kernel)
    B, A, M, N = x.shape
    pm, pn = m // 2, n // 2
    padded = np.zeros((B, M + 2 * pm, N + 2 * pn, A))
    padded[:, pm:pm + M, pn:pn + N, :] = x.transpose(0, 2, 3, 1)
    out = np.empty((B, M, N, A, m * n))
    k = 0
    for u in range(m):
        for v in range(n):
            out[..., k] = padded[:, u:u + M, v:v + N, :]
            k += 1
    return out.reshape(B, M * N, A, m * n)


def patches_adjoint(g: np.ndarray, kernel, image_shape) -> np.ndarray:
    """Adjoint of ``patches``: (B, M*N, A, m*n) -> (B, A, M, N)."""
    m, n = check_kernel(kernel)
    M, N = image_shape
    B, _, A, _ = g.shape
    pm, pn = m // 2, n // 2
    g = g.reshape(B, M, N, A, m * n)
    padded = np.zeros((B, M + 2 * pm, N + 2 * pn, A))
    k = 0
    for u in range(m):
        for v in range(n):
            padded[:, u:u + M, v:v + N, :] += g[..., k]
            k += 1
    return padded[:, pm:pm + M, pn:pn + N, :].transpose(0, 3, 1, 2).copy()
