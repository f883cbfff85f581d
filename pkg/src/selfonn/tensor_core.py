"""Primitive 2D map operations underlying every layer type.

Feature maps are 2D numpy arrays in (row, column) order; kernels index as
``kernel[r, t]`` and all sliding-window products are cross-correlations,
``out[m, n] = sum_{r,t} kernel[r, t] * x[m+r, n+t]`` (no kernel rotation
anywhere in this engine).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Map and kernel dimensions are incompatible with the requested op."""


class NonFiniteError(ValueError):
    """A map contains NaN or Inf where finite values are required."""


def ensure_finite(arr: np.ndarray, what: str = "map") -> np.ndarray:
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains non-finite entries")
    return arr


def conv2d_valid(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-mode cross-correlation of ``x`` with ``kernel``.

    Output has shape ``(H - kx + 1, W - ky + 1)`` with
    ``out[m, n] = sum_{r,t} kernel[r, t] * x[m+r, n+t]``.
    """
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    if x.ndim != 2 or kernel.ndim != 2:
        raise ShapeError(f"expected 2D map and kernel, got {x.ndim}D and {kernel.ndim}D")
    if x.shape[0] < kernel.shape[0] or x.shape[1] < kernel.shape[1]:
        raise ShapeError(f"kernel {kernel.shape} does not fit inside map {x.shape}")
    windows = sliding_window_view(x, kernel.shape)
    return np.tensordot(windows, kernel, axes=([2, 3], [0, 1]))


def conv2d_full(delta: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Boundary-padded convolution: the constant-kernel case of
    :func:`conv2dvar_full`.

    ``delta`` of shape ``(M - kx + 1, N - ky + 1)`` is zero-padded by
    ``kx - 1`` rows and ``ky - 1`` columns on every side, giving an
    ``(M, N)`` output ``out[m, n] = sum_{r,t} padded[m-r, n-t] * kernel[r, t]``.
    Equivalent to valid cross-correlation of the padded map with the
    180-degree flipped kernel.
    """
    delta = np.asarray(delta)
    kernel = np.asarray(kernel)
    kx, ky = kernel.shape
    padded = np.pad(delta, ((kx - 1, kx - 1), (ky - 1, ky - 1)))
    return conv2d_valid(padded, kernel[::-1, ::-1])


def conv2dvar_full(delta_next: np.ndarray, varkernel: np.ndarray) -> np.ndarray:
    """Position-dependent full convolution used for delta back-propagation.

    ``varkernel`` has shape ``(M, N, kx, ky)``; ``delta_next`` must have the
    matching valid-convolution shape ``(M - kx + 1, N - ky + 1)``. The delta
    is zero-padded by ``kx - 1`` rows and ``ky - 1`` columns on both ends so
    every ``(m - r, n - t)`` access is defined, and

    ``out[m, n] = sum_{r,t} padded[m-r, n-t] * varkernel[m, n, r, t]``.
    """
    varkernel = np.asarray(varkernel)
    delta_next = np.asarray(delta_next)
    if varkernel.ndim != 4:
        raise ShapeError(f"varkernel must be 4D (M, N, kx, ky), got {varkernel.ndim}D")
    m_size, n_size, kx, ky = varkernel.shape
    expected = (m_size - kx + 1, n_size - ky + 1)
    if delta_next.shape != expected:
        raise ShapeError(
            f"delta shape {delta_next.shape} does not match varkernel index "
            f"ranges (expected {expected})"
        )
    padded = np.pad(delta_next, ((kx - 1, kx - 1), (ky - 1, ky - 1)))
    out = np.zeros((m_size, n_size), dtype=np.result_type(delta_next, varkernel))
    for r in range(kx):
        for t in range(ky):
            # padded[m - r + kx - 1, n - t + ky - 1] over the full (m, n) grid
            block = padded[kx - 1 - r : kx - 1 - r + m_size, ky - 1 - t : ky - 1 - t + n_size]
            out += block * varkernel[:, :, r, t]
    return out


def power_maps(y: np.ndarray, q_order: int) -> np.ndarray:
    """Elementwise powers ``y, y^2, ..., y^Q`` stacked along a new first axis.

    Entry ``[q - 1]`` holds the q-th power; the first entry equals ``y``.
    Computed by repeated multiplication so they can double as the cached
    power maps reused during back-propagation.
    """
    if q_order < 1:
        raise ValueError(f"q_order must be >= 1, got {q_order}")
    y = ensure_finite(y, "power_maps input")
    out = np.empty((q_order,) + y.shape, dtype=y.dtype if y.dtype.kind == "f" else np.float64)
    out[0] = y
    for q in range(1, q_order):
        np.multiply(out[q - 1], y, out=out[q])
    return out


def power_stack(maps: np.ndarray, q_order: int) -> np.ndarray:
    """:func:`power_maps` applied to a stack of maps.

    Input shape ``(n, H, W)``, output ``(n, Q, H, W)``; ``out[k]`` equals
    ``power_maps(maps[k], q_order)``.
    """
    maps = np.asarray(maps)
    if maps.ndim != 3:
        raise ShapeError(f"expected (n, H, W) stack, got {maps.ndim}D")
    return np.stack([power_maps(m, q_order) for m in maps])


def downsample_avg(y: np.ndarray, ssx: int, ssy: int) -> np.ndarray:
    """Block-average pooling by factors ``(ssx, ssy)`` (rows, columns).

    Dimensions must divide evenly; no partial blocks. The mean is anchored
    to each block's first element so replicated blocks average back to that
    element exactly (keeps upsample/downsample an exact round trip).
    """
    y = np.asarray(y)
    if ssx < 1 or ssy < 1:
        raise ValueError("sampling factors must be >= 1")
    h, w = y.shape
    if h % ssx or w % ssy:
        raise ShapeError(f"map {y.shape} not divisible by block {(ssx, ssy)}")
    if ssx == 1 and ssy == 1:
        return y.copy()
    blocks = y.reshape(h // ssx, ssx, w // ssy, ssy)
    anchor = blocks[:, 0, :, 0]
    return anchor + (blocks - anchor[:, None, :, None]).mean(axis=(1, 3))


def upsample_zero_order(y: np.ndarray, usx: int, usy: int) -> np.ndarray:
    """Zero-order hold upsampling: each pixel becomes a ``usx x usy`` block."""
    y = np.asarray(y)
    if usx < 1 or usy < 1:
        raise ValueError("sampling factors must be >= 1")
    return np.repeat(np.repeat(y, usx, axis=0), usy, axis=1)


def crop_center(arr: np.ndarray, shape) -> np.ndarray:
    """Center crop of the trailing two axes to ``shape`` (floor offsets).

    Valid convolutions shrink maps, so targets get cropped to the network
    output before any loss or metric is computed.
    """
    arr = np.asarray(arr)
    h, w = arr.shape[-2], arr.shape[-1]
    ch, cw = int(shape[0]), int(shape[1])
    if ch > h or cw > w or ch < 1 or cw < 1:
        raise ShapeError(f"cannot crop {arr.shape[-2:]} to {(ch, cw)}")
    r0 = (h - ch) // 2
    c0 = (w - cw) // 2
    return arr[..., r0 : r0 + ch, c0 : c0 + cw]
