"""Pure-numpy kernel fallbacks (strided slicing, no Python-level inner loops)."""

from __future__ import annotations

import numpy as np


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    b, h, w, c = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = _pad(x, pad)
    cols = np.empty((b, oh, ow, kh * kw * c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            blk = (i * kw + j) * c
            cols[:, :, :, blk : blk + c] = xp[
                :, i : i + stride * oh : stride, j : j + stride * ow : stride, :
            ]
    return cols


def col2im(gcols: np.ndarray, h: int, w: int, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    b, oh, ow, k = gcols.shape
    c = k // (kh * kw)
    gxp = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            blk = (i * kw + j) * c
            gxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += gcols[
                :, :, :, blk : blk + c
            ]
    if pad == 0:
        return gxp
    return np.ascontiguousarray(gxp[:, pad : pad + h, pad : pad + w, :])


def nearest_code(z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    n = z.shape[0]
    k = codebook.shape[0]
    d2 = np.empty((n, k), dtype=np.result_type(z.dtype, codebook.dtype))
    for ki in range(k):
        diff = z - codebook[ki]
        d2[:, ki] = np.einsum("nd,nd->n", diff, diff)
    return np.argmin(d2, axis=1).astype(np.int64)
