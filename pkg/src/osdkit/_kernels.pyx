# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: 3x3 patch gathering for convolution and windowed-sinc
interpolation for resampling.

Every routine here has a numpy twin in ``osdkit._fallback`` with identical
semantics; ``osdkit._backend`` picks one at import time.
"""
import numpy as np

cimport cython
from libc.math cimport ceil, fabs, floor
from libc.string cimport memcpy

ctypedef fused real:
    float
    double


def im2col3x3(const real[:, :, :, ::1] x):
    """Gather zero-padded 3x3 neighbourhoods: (B, T, F, C) -> (B, T, F, 9, C)."""
    cdef Py_ssize_t B = x.shape[0], T = x.shape[1], F = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t b, t, f, i, j, tt, ff
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((B, T, F, 9, C), dtype=dtype)
    cdef real[:, :, :, :, ::1] o = out
    if C == 0:
        return out
    with nogil:
        for b in range(B):
            for t in range(T):
                for i in range(3):
                    tt = t + i - 1
                    if tt < 0 or tt >= T:
                        continue
                    for f in range(F):
                        for j in range(3):
                            ff = f + j - 1
                            if ff < 0 or ff >= F:
                                continue
                            memcpy(&o[b, t, f, i * 3 + j, 0], &x[b, tt, ff, 0],
                                   C * sizeof(real))
    return out


def col2im3x3(const real[:, :, :, :, ::1] cols):
    """Adjoint of :func:`im2col3x3`: scatter-add (B, T, F, 9, C) -> (B, T, F, C)."""
    cdef Py_ssize_t B = cols.shape[0], T = cols.shape[1], F = cols.shape[2], C = cols.shape[4]
    cdef Py_ssize_t b, t, f, i, j, tt, ff, c
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((B, T, F, C), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    with nogil:
        for b in range(B):
            for t in range(T):
                for i in range(3):
                    tt = t + i - 1
                    if tt < 0 or tt >= T:
                        continue
                    for f in range(F):
                        for j in range(3):
                            ff = f + j - 1
                            if ff < 0 or ff >= F:
                                continue
                            for c in range(C):
                                o[b, tt, ff, c] += cols[b, t, f, i * 3 + j, c]
    return out


def sinc_resample(const double[::1] x, const double[::1] table, double step,
                  Py_ssize_t n_out, double cutoff, int resolution, int zeros):
    """Evaluate y[m] = cutoff * sum_k x[k] * h(cutoff * |m*step - k|).

    ``table`` samples the windowed sinc on [0, zeros] at ``resolution`` points
    per zero crossing (plus a trailing zero); values in between are linearly
    interpolated. Input samples outside [0, len(x)) count as zero.
    """
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t limit = <Py_ssize_t>zeros * resolution
    cdef double half_width = zeros / cutoff
    cdef double scale = cutoff * resolution
    cdef Py_ssize_t m, k, k_lo, k_hi, idx
    cdef double t, u, frac, acc
    out = np.zeros(n_out, dtype=np.float64)
    cdef double[::1] y = out
    with nogil:
        for m in range(n_out):
            t = m * step
            k_lo = <Py_ssize_t>ceil(t - half_width)
            k_hi = <Py_ssize_t>floor(t + half_width)
            if k_lo < 0:
                k_lo = 0
            if k_hi > n - 1:
                k_hi = n - 1
            acc = 0.0
            for k in range(k_lo, k_hi + 1):
                u = fabs(t - k) * scale
                idx = <Py_ssize_t>u
                if idx >= limit:
                    continue
                frac = u - idx
                acc = acc + x[k] * (table[idx] + frac * (table[idx + 1] - table[idx]))
            y[m] = acc * cutoff
    return out
