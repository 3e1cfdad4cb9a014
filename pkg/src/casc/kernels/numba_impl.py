"""Numba-JIT kernel implementations.

Kernels run single-threaded (the BLAS pool already owns the cores) and the
per-cell accumulation order mirrors the numpy fallback's slab order, so both
backends produce bit-identical floating-point results.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _im2col_core(xp, kh, kw, stride, oh, ow, cols):
    # contiguous (ow, c) row blocks; copies are order-independent
    b = xp.shape[0]
    c = xp.shape[3]
    stop = (ow - 1) * stride + 1
    for n in range(b):
        for i in range(kh):
            for j in range(kw):
                blk = (i * kw + j) * c
                for oy in range(oh):
                    y = oy * stride + i
                    cols[n, oy, :, blk : blk + c] = xp[n, y, j : j + stop : stride, :]


@njit(cache=True)
def _col2im_core(gcols, kh, kw, stride, gxp):
    # (i,j)-major accumulation per output cell matches the numpy fallback's
    # slab-add order, keeping the two backends bit-identical
    b, oh, ow, _ = gcols.shape
    c = gxp.shape[3]
    stop = (ow - 1) * stride + 1
    for n in range(b):
        for i in range(kh):
            for j in range(kw):
                blk = (i * kw + j) * c
                for oy in range(oh):
                    y = oy * stride + i
                    gxp[n, y, j : j + stop : stride, :] += gcols[n, oy, :, blk : blk + c]


@njit(cache=True)
def _nearest_code_core(z, codebook, out):
    n, d = z.shape
    k = codebook.shape[0]
    for i in range(n):
        best = 0
        best_d = np.inf
        for ki in range(k):
            acc = 0.0
            for j in range(d):
                diff = z[i, j] - codebook[ki, j]
                acc += diff * diff
            if acc < best_d:
                best_d = acc
                best = ki
        out[i] = best


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    xp[:, pad : pad + h, pad : pad + w, :] = x
    return xp


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    b, h, w, c = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = _pad(x, pad)
    cols = np.empty((b, oh, ow, kh * kw * c), dtype=x.dtype)
    _im2col_core(xp, kh, kw, stride, oh, ow, cols)
    return cols


def col2im(gcols: np.ndarray, h: int, w: int, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    b = gcols.shape[0]
    c = gcols.shape[3] // (kh * kw)
    gxp = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=gcols.dtype)
    _col2im_core(gcols, kh, kw, stride, gxp)
    if pad == 0:
        return gxp
    return np.ascontiguousarray(gxp[:, pad : pad + h, pad : pad + w, :])


def nearest_code(z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    out = np.empty(z.shape[0], dtype=np.int64)
    _nearest_code_core(z, codebook, out)
    return out
