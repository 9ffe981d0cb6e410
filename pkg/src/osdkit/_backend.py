"""Kernel dispatch: compiled Cython extension when importable, numpy otherwise.

Set ``OSDKIT_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from osdkit import _fallback

_ext = None
if not os.environ.get("OSDKIT_PURE_PYTHON"):
    try:
        from osdkit import _kernels as _ext
    except ImportError:
        _ext = None

BACKEND = "cython" if _ext is not None else "python"
_impl = _ext if _ext is not None else _fallback


def _real(a):
    a = np.asarray(a)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    return np.ascontiguousarray(a)


def im2col3x3(x):
    """(B, T, F, C) -> (B, T, F, 9, C) zero-padded 3x3 patches, dtype preserved."""
    return _impl.im2col3x3(_real(x))


def col2im3x3(cols):
    return _impl.col2im3x3(_real(cols))


def sinc_resample(x, table, step, n_out, cutoff, resolution, zeros):
    return _impl.sinc_resample(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(table, dtype=np.float64),
        float(step),
        int(n_out),
        float(cutoff),
        int(resolution),
        int(zeros),
    )
