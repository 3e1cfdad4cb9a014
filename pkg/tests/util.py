"""Shared test oracles: reference convolution and finite-difference gradients."""

from __future__ import annotations

import numpy as np
from scipy import signal


def ref_conv2d(x, w, b=None, stride=1, padding=0):
    """Independent channels-last conv oracle built on scipy.signal.correlate2d."""
    bsz, h, wd, ci = x.shape
    kh, kw, ci2, co = w.shape
    assert ci == ci2
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    out_full_h = xp.shape[1] - kh + 1
    out_full_w = xp.shape[2] - kw + 1
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((bsz, oh, ow, co), dtype=np.float64)
    for n in range(bsz):
        for o in range(co):
            acc = np.zeros((out_full_h, out_full_w), dtype=np.float64)
            for c in range(ci):
                acc += signal.correlate2d(xp[n, :, :, c].astype(np.float64), w[:, :, c, o].astype(np.float64), mode="valid")
            out[n, :, :, o] = acc[::stride, ::stride]
            if b is not None:
                out[n, :, :, o] += b[o]
    return out


def numeric_grad(f, arr: np.ndarray, indices=None, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar-valued f w.r.t. entries of arr.

    Mutates arr in place during probing and restores it. If `indices` is
    given, only those flat indices are probed (others left as zero).
    """
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / denom)
