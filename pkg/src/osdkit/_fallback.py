"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def im2col3x3(x):
    B, T, F, C = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.empty((B, T, F, 9, C), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            out[:, :, :, i * 3 + j, :] = xp[:, i : i + T, j : j + F, :]
    return out


def col2im3x3(cols):
    B, T, F, _, C = cols.shape
    xp = np.zeros((B, T + 2, F + 2, C), dtype=cols.dtype)
    for i in range(3):
        for j in range(3):
            xp[:, i : i + T, j : j + F, :] += cols[:, :, :, i * 3 + j, :]
    return np.ascontiguousarray(xp[:, 1:-1, 1:-1, :])


def sinc_resample(x, table, step, n_out, cutoff, resolution, zeros, chunk=4096):
    n = x.shape[0]
    limit = zeros * resolution
    half_width = zeros / cutoff
    scale = cutoff * resolution
    n_taps = int(np.ceil(2 * half_width)) + 2
    offsets = np.arange(n_taps)
    out = np.zeros(n_out, dtype=np.float64)
    for start in range(0, n_out, chunk):
        t = np.arange(start, min(start + chunk, n_out)) * step
        k = np.ceil(t - half_width).astype(np.int64)[:, None] + offsets
        valid = (k >= 0) & (k < n) & (k <= np.floor(t + half_width)[:, None])
        u = np.abs(t[:, None] - k) * scale
        idx = u.astype(np.int64)
        valid &= idx < limit
        idx = np.where(valid, idx, 0)
        frac = u - idx
        w = table[idx] + frac * (table[idx + 1] - table[idx])
        xs = x[np.clip(k, 0, max(n - 1, 0))] if n else np.zeros_like(w)
        out[start : start + t.size] = np.where(valid, xs * w, 0.0).sum(axis=1) * cutoff
    return out
