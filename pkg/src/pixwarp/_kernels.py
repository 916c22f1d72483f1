"""Numba-jitted inner loops for the spatial filtering hot path.

Everything here is deliberately serial with a fixed accumulation order so
results are bit-reproducible regardless of thread settings.
"""

import numba
import numpy as np


@numba.njit(cache=True, fastmath=False)
def _depthwise_corr_f32(xp, k, out):
    n, c, hp, wp = xp.shape
    kh, kw = k.shape[1], k.shape[2]
    h = hp - kh + 1
    w = wp - kw + 1
    for b in range(n):
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    acc = np.float32(0.0)
                    for u in range(kh):
                        for v in range(kw):
                            acc += k[b, u, v] * xp[b, ch, i + u, j + v]
                    out[b, ch, i, j] = acc


@numba.njit(cache=True, fastmath=False)
def _depthwise_corr_f64(xp, k, out):
    n, c, hp, wp = xp.shape
    kh, kw = k.shape[1], k.shape[2]
    h = hp - kh + 1
    w = wp - kw + 1
    for b in range(n):
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    acc = 0.0
                    for u in range(kh):
                        for v in range(kw):
                            acc += k[b, u, v] * xp[b, ch, i + u, j + v]
                    out[b, ch, i, j] = acc


def depthwise_corr(xp, kernels):
    """Valid cross-correlation of each channel with a per-sample 2D kernel.

    xp:       (N, C, Hp, Wp) float array, already padded by the caller
    kernels:  (N, kh, kw) one kernel per sample, shared across channels
    returns:  (N, C, Hp-kh+1, Wp-kw+1)
    """
    xp = np.ascontiguousarray(xp)
    kernels = np.ascontiguousarray(kernels)
    n, c, hp, wp = xp.shape
    kh, kw = kernels.shape[1], kernels.shape[2]
    if kernels.shape[0] != n:
        raise ValueError(f"kernel batch {kernels.shape[0]} != input batch {n}")
    if kh > hp or kw > wp:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    out = np.empty((n, c, hp - kh + 1, wp - kw + 1), dtype=xp.dtype)
    if xp.dtype == np.float64:
        _depthwise_corr_f64(xp, kernels.astype(np.float64), out)
    else:
        _depthwise_corr_f32(xp, kernels.astype(np.float32), out)
    return out
