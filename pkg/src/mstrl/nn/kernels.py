"""Row kernels for normalization followed by activation.

The normalization statistics and its backward run as numba loops (one or two
passes per row). Exponentials stay in numpy, whose vectorized expm1 is an
order of magnitude faster than numba's scalar libm call.
"""
from __future__ import annotations

import ctypes
import ctypes.util
import math

import numpy as np
from numba import njit


def tune_allocator() -> bool:
    """Keep large numpy temporaries on the heap instead of fresh mmaps.

    Minibatch activations are ~1 MB; with glibc's default threshold every such
    temporary is mmapped and page-faulted anew, which costs more than the
    arithmetic on small machines.
    """
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        m_trim_threshold, m_top_pad, m_mmap_threshold = -1, -2, -3
        ok = libc.mallopt(m_mmap_threshold, 1 << 30)
        libc.mallopt(m_trim_threshold, 1 << 31)
        libc.mallopt(m_top_pad, 64 << 20)
        return bool(ok)
    except (OSError, AttributeError):
        return False


@njit(cache=True)
def _layer_norm_rows(x, gain, shift, eps, z, xhat, rstd):
    n, h = x.shape
    for i in range(n):
        mu = 0.0
        for j in range(h):
            mu += x[i, j]
        mu /= h
        var = 0.0
        for j in range(h):
            d = x[i, j] - mu
            var += d * d
        var /= h
        r = 1.0 / math.sqrt(var + eps)
        rstd[i] = r
        for j in range(h):
            xh = (x[i, j] - mu) * r
            xhat[i, j] = xh
            z[i, j] = xh * gain[j] + shift[j]


def norm_act_forward(x, gain, shift, eps, use_ln, use_elu):
    """Returns (y, xhat, rstd); xhat and rstd are empty without normalization."""
    if use_ln:
        z = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(x.shape[0], dtype=x.dtype)
        _layer_norm_rows(x, gain, shift, eps, z, xhat, rstd)
    else:
        z = x
        xhat = np.empty((0, 0), dtype=x.dtype)
        rstd = np.empty(0, dtype=x.dtype)
    if use_elu:
        # expm1(min(z, 0)) >= z for z <= 0 and is 0 otherwise
        neg = np.minimum(z, 0.0)
        np.expm1(neg, out=neg)
        y = np.maximum(z, neg, out=neg)
    else:
        y = np.maximum(z, 0.0, out=z if use_ln else None)
    return y, xhat, rstd


@njit(cache=True)
def norm_act_backward(g, y, xhat, rstd, gain, use_ln, use_elu, need_dx):
    n, h = g.shape
    dx = np.empty_like(g) if need_dx else np.empty((0, 0), dtype=g.dtype)
    dgain = np.zeros(h, dtype=g.dtype)
    dshift = np.zeros(h, dtype=g.dtype)
    dz = np.empty(h, dtype=g.dtype)
    for i in range(n):
        for j in range(h):
            yj = y[i, j]
            if use_elu:
                # slope 1 at the origin; y >= 0 exactly when the input was >= 0
                dz[j] = g[i, j] if yj >= 0 else g[i, j] * (yj + 1.0)
            else:
                dz[j] = g[i, j] if yj > 0 else 0.0
        if not use_ln:
            if need_dx:
                for j in range(h):
                    dx[i, j] = dz[j]
            continue
        s1 = 0.0
        s2 = 0.0
        for j in range(h):
            xh = xhat[i, j]
            dgain[j] += dz[j] * xh
            dshift[j] += dz[j]
            dxh = dz[j] * gain[j]
            s1 += dxh
            s2 += dxh * xh
        if need_dx:
            s1 /= h
            s2 /= h
            r = rstd[i]
            for j in range(h):
                dx[i, j] = r * (dz[j] * gain[j] - s1 - xhat[i, j] * s2)
    return dx, dgain, dshift


def warmup() -> None:
    """Trigger compilation for both float widths."""
    for dt in (np.float64, np.float32):
        x = np.zeros((2, 3), dtype=dt)
        v = np.ones(3, dtype=dt)
        for ln in (True, False):
            for elu in (True, False):
                y, xh, r = norm_act_forward(x, v, v, 1e-5, ln, elu)
                norm_act_backward(x, y, xh, r, v, ln, elu, True)
