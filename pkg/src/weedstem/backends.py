"""Hot numeric kernels with numba acceleration and a pure-numpy fallback.

The backend is chosen once at import time. Set WEEDSTEM_NO_NUMBA=1 (or
WEEDSTEM_DETERMINISTIC=1) to force the numpy path.
"""
from __future__ import annotations

import os

import numpy as np

USE_NUMBA = not (
    os.environ.get("WEEDSTEM_NO_NUMBA", "").strip() in ("1", "true", "yes")
    or os.environ.get("WEEDSTEM_DETERMINISTIC", "").strip() in ("1", "true", "yes")
)

if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover
        USE_NUMBA = False


# ---------------------------------------------------------------------------
# im2col / col2im for 3x3 stride-2 pad-1 convolutions (NHWC layout)
# ---------------------------------------------------------------------------

def _im2col_numpy(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    oh, ow = h // 2, w // 2
    xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    cols = np.empty((n, oh, ow, 9, c), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, :, ky * 3 + kx, :] = xp[:, ky : ky + 2 * oh : 2, kx : kx + 2 * ow : 2, :]
    return cols.reshape(n, oh, ow, 9 * c)


def _col2im_numpy(d_cols: np.ndarray, h: int, w: int, c: int) -> np.ndarray:
    n = d_cols.shape[0]
    oh, ow = h // 2, w // 2
    d_cols = d_cols.reshape(n, oh, ow, 9, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=d_cols.dtype)
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky : ky + 2 * oh : 2, kx : kx + 2 * ow : 2, :] += d_cols[:, :, :, ky * 3 + kx, :]
    return dxp[:, 1:-1, 1:-1, :]


def _im2col_s1_numpy(x: np.ndarray) -> np.ndarray:
    """3x3 stride-1 pad-1 variant; output resolution equals input resolution."""
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    cols = np.empty((n, h, w, 9, c), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, :, ky * 3 + kx, :] = xp[:, ky : ky + h, kx : kx + w, :]
    return cols.reshape(n, h, w, 9 * c)


def _col2im_s1_numpy(d_cols: np.ndarray, h: int, w: int, c: int) -> np.ndarray:
    n = d_cols.shape[0]
    d_cols = d_cols.reshape(n, h, w, 9, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=d_cols.dtype)
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky : ky + h, kx : kx + w, :] += d_cols[:, :, :, ky * 3 + kx, :]
    return dxp[:, 1:-1, 1:-1, :]


def _iou_matrix_numpy(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    xa0, ya0, xa1, ya1 = (boxes_a[:, i, None] for i in range(4))
    xb0, yb0, xb1, yb1 = (boxes_b[None, :, i] for i in range(4))
    iw = np.maximum(0.0, np.minimum(xa1, xb1) - np.maximum(xa0, xb0))
    ih = np.maximum(0.0, np.minimum(ya1, yb1) - np.maximum(ya0, yb0))
    inter = iw * ih
    area_a = (xa1 - xa0) * (ya1 - ya0)
    area_b = (xb1 - xb0) * (yb1 - yb0)
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


if USE_NUMBA:

    @njit(cache=True)
    def _im2col_numba(x):
        n, h, w, c = x.shape
        oh, ow = h // 2, w // 2
        cols = np.zeros((n, oh, ow, 9 * c), dtype=x.dtype)
        for b in range(n):
            for oy in range(oh):
                for ox in range(ow):
                    for ky in range(3):
                        iy = 2 * oy + ky - 1
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(3):
                            ix = 2 * ox + kx - 1
                            if ix < 0 or ix >= w:
                                continue
                            base = (ky * 3 + kx) * c
                            for ch in range(c):
                                cols[b, oy, ox, base + ch] = x[b, iy, ix, ch]
        return cols

    @njit(cache=True)
    def _col2im_numba(d_cols, h, w, c):
        n = d_cols.shape[0]
        oh, ow = h // 2, w // 2
        dx = np.zeros((n, h, w, c), dtype=d_cols.dtype)
        for b in range(n):
            for oy in range(oh):
                for ox in range(ow):
                    for ky in range(3):
                        iy = 2 * oy + ky - 1
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(3):
                            ix = 2 * ox + kx - 1
                            if ix < 0 or ix >= w:
                                continue
                            base = (ky * 3 + kx) * c
                            for ch in range(c):
                                dx[b, iy, ix, ch] += d_cols[b, oy, ox, base + ch]
        return dx

    @njit(cache=True)
    def _im2col_s1_numba(x):
        n, h, w, c = x.shape
        cols = np.zeros((n, h, w, 9 * c), dtype=x.dtype)
        for b in range(n):
            for oy in range(h):
                for ox in range(w):
                    for ky in range(3):
                        iy = oy + ky - 1
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(3):
                            ix = ox + kx - 1
                            if ix < 0 or ix >= w:
                                continue
                            base = (ky * 3 + kx) * c
                            for ch in range(c):
                                cols[b, oy, ox, base + ch] = x[b, iy, ix, ch]
        return cols

    @njit(cache=True)
    def _col2im_s1_numba(d_cols, h, w, c):
        n = d_cols.shape[0]
        dx = np.zeros((n, h, w, c), dtype=d_cols.dtype)
        for b in range(n):
            for oy in range(h):
                for ox in range(w):
                    for ky in range(3):
                        iy = oy + ky - 1
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(3):
                            ix = ox + kx - 1
                            if ix < 0 or ix >= w:
                                continue
                            base = (ky * 3 + kx) * c
                            for ch in range(c):
                                dx[b, iy, ix, ch] += d_cols[b, oy, ox, base + ch]
        return dx

    @njit(cache=True)
    def _iou_matrix_numba(boxes_a, boxes_b):
        na, nb = boxes_a.shape[0], boxes_b.shape[0]
        out = np.zeros((na, nb), dtype=np.float64)
        for i in range(na):
            ax0, ay0, ax1, ay1 = boxes_a[i, 0], boxes_a[i, 1], boxes_a[i, 2], boxes_a[i, 3]
            area_a = (ax1 - ax0) * (ay1 - ay0)
            for j in range(nb):
                bx0, by0, bx1, by1 = boxes_b[j, 0], boxes_b[j, 1], boxes_b[j, 2], boxes_b[j, 3]
                iw = min(ax1, bx1) - max(ax0, bx0)
                ih = min(ay1, by1) - max(ay0, by0)
                if iw <= 0.0 or ih <= 0.0:
                    continue
                inter = iw * ih
                union = area_a + (bx1 - bx0) * (by1 - by0) - inter
                if union > 0.0:
                    out[i, j] = inter / union
        return out

    def im2col(x: np.ndarray) -> np.ndarray:
        n, h, w, c = x.shape
        return _im2col_numba(np.ascontiguousarray(x)).reshape(n, h // 2, w // 2, 9 * c)

    def col2im(d_cols: np.ndarray, h: int, w: int, c: int) -> np.ndarray:
        return _col2im_numba(np.ascontiguousarray(d_cols), h, w, c)

    def im2col_s1(x: np.ndarray) -> np.ndarray:
        return _im2col_s1_numba(np.ascontiguousarray(x))

    def col2im_s1(d_cols: np.ndarray, h: int, w: int, c: int) -> np.ndarray:
        return _col2im_s1_numba(np.ascontiguousarray(d_cols), h, w, c)

    def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
        boxes_a = np.ascontiguousarray(boxes_a, dtype=np.float64)
        boxes_b = np.ascontiguousarray(boxes_b, dtype=np.float64)
        if boxes_a.size == 0 or boxes_b.size == 0:
            return np.zeros((boxes_a.shape[0], boxes_b.shape[0]))
        return _iou_matrix_numba(boxes_a, boxes_b)

else:
    im2col = _im2col_numpy
    col2im = _col2im_numpy
    im2col_s1 = _im2col_s1_numpy
    col2im_s1 = _col2im_s1_numpy

    def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
        boxes_a = np.asarray(boxes_a, dtype=np.float64)
        boxes_b = np.asarray(boxes_b, dtype=np.float64)
        if boxes_a.size == 0 or boxes_b.size == 0:
            return np.zeros((boxes_a.shape[0], boxes_b.shape[0]))
        return _iou_matrix_numpy(boxes_a, boxes_b)


# exposed for the benchmark script, independent of the selected backend
numpy_impls = {"im2col": _im2col_numpy, "col2im": _col2im_numpy,
               "im2col_s1": _im2col_s1_numpy, "col2im_s1": _col2im_s1_numpy,
               "iou_matrix": _iou_matrix_numpy}
