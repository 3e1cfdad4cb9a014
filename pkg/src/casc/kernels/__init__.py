"""Hot numeric kernels with two interchangeable backends.

The backends compute bit-identical results; ``numba`` JIT-compiles the
loops, ``numpy`` uses strided slab operations. Selection:

1. ``set_backend("numba" | "numpy" | "auto")`` at runtime,
2. the ``CASC_KERNELS`` environment variable,
3. default ``auto``.

``auto`` picks the measured-fastest implementation per kernel (strided
numpy for the patch fold/unfold, compiled loops for the codebook scan);
since the backends agree bitwise, mixing them changes no results. Forcing
``numba`` or ``numpy`` applies one backend uniformly — ``bench-speed
--compare-backends`` reports both.

All kernels operate on channels-last arrays (B, H, W, C).
"""

from __future__ import annotations

import os

import numpy as np

from casc.errors import ConfigurationError

from . import numpy_impl

_MODES = ("numba", "numpy", "auto")
# measured on a 2-core CPU: ufunc slab ops win the folds, compiled loops
# win the nearest-neighbor scan
_AUTO_PICK = {"im2col": "numpy", "col2im": "numpy", "nearest_code": "numba"}
_backend: str | None = None


def _numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def _resolve_default() -> str:
    env = os.environ.get("CASC_KERNELS", "auto").lower()
    if env not in _MODES:
        raise ConfigurationError(f"CASC_KERNELS must be one of numba|numpy|auto, got {env!r}")
    if env == "numba" and not _numba_available():
        raise ConfigurationError("CASC_KERNELS=numba but numba is not importable")
    return env


def get_backend() -> str:
    global _backend
    if _backend is None:
        _backend = _resolve_default()
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in _MODES:
        raise ConfigurationError(f"unknown kernel backend {name!r}")
    if name == "numba" and not _numba_available():
        raise ConfigurationError("numba backend requested but numba is not importable")
    _backend = name


def available_backends() -> tuple[str, ...]:
    return ("numba", "numpy") if _numba_available() else ("numpy",)


def _impl(kernel: str):
    mode = get_backend()
    if mode == "auto":
        mode = _AUTO_PICK[kernel] if _numba_available() else "numpy"
    if mode == "numba":
        from . import numba_impl

        return numba_impl
    return numpy_impl


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Unfold (B,H,W,C) into conv patches (B,OH,OW,kh*kw*C)."""
    return _impl("im2col").im2col(np.ascontiguousarray(x), kh, kw, stride, pad)


def col2im(gcols: np.ndarray, h: int, w: int, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: fold patch gradients back onto (B,H,W,C)."""
    return _impl("col2im").col2im(np.ascontiguousarray(gcols), h, w, kh, kw, stride, pad)


def nearest_code(z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the L2-nearest codebook row for each row of z: (N,D),(K,D) -> (N,)."""
    z = np.ascontiguousarray(z, dtype=np.float64)
    codebook = np.ascontiguousarray(codebook, dtype=np.float64)
    if codebook.ndim != 2 or codebook.shape[0] < 1:
        raise ConfigurationError("codebook must be a nonempty K x D matrix")
    if z.shape[-1] != codebook.shape[1]:
        raise ConfigurationError(
            f"vector dim {z.shape[-1]} does not match codebook dim {codebook.shape[1]}"
        )
    return _impl("nearest_code").nearest_code(z, codebook)
