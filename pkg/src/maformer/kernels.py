"""Fused numeric kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import time from ``MAFORMER_NUMBA``:
``"1"`` (default when numba imports) uses the ``@njit`` kernels, ``"0"`` forces
numpy. Both paths implement identical math; reductions in the numba kernels run
sequentially over the last axis, so results are deterministic per backend but
may differ from numpy in the last ulp.

All kernels operate on 2-D row-major arrays ``(rows, cols)``; callers reshape.
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import erf as _erf

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------

def np_layer_norm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    var = (xc * xc).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd[:, None]
    return xhat * gamma + beta, mean, rstd


def np_layer_norm_bwd(g, x, gamma, mean, rstd):
    n = x.shape[1]
    xhat = (x - mean[:, None]) * rstd[:, None]
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    gx = g * gamma
    dx = (gx - gx.mean(axis=1, keepdims=True)
          - xhat * (gx * xhat).sum(axis=1, keepdims=True) / n) * rstd[:, None]
    return dx, dgamma, dbeta


def np_softmax_fwd(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def np_softmax_bwd(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def np_gelu_fwd(x):
    return 0.5 * x * (1.0 + _erf(x * _SQRT_HALF))


def np_gelu_bwd(x, g):
    cdf = 0.5 * (1.0 + _erf(x * _SQRT_HALF))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return g * (cdf + x * pdf)


def np_scatter_add_rows(out, idx, src):
    """``out[idx[i]] += src[i]`` with repeated indices accumulated in order."""
    np.add.at(out, idx, src)
    return out


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False


if HAS_NUMBA:

    @njit(cache=True)
    def nb_layer_norm_fwd(x, gamma, beta, eps):
        rows, n = x.shape
        y = np.empty_like(x)
        mean = np.empty(rows, dtype=x.dtype)
        rstd = np.empty(rows, dtype=x.dtype)
        for r in range(rows):
            s = 0.0
            for c in range(n):
                s += x[r, c]
            mu = s / n
            v = 0.0
            for c in range(n):
                d = x[r, c] - mu
                v += d * d
            inv = 1.0 / math.sqrt(v / n + eps)
            mean[r] = mu
            rstd[r] = inv
            for c in range(n):
                y[r, c] = (x[r, c] - mu) * inv * gamma[c] + beta[c]
        return y, mean, rstd

    @njit(cache=True)
    def nb_layer_norm_bwd(g, x, gamma, mean, rstd):
        rows, n = x.shape
        dx = np.empty_like(x)
        dgamma = np.zeros(n, dtype=x.dtype)
        dbeta = np.zeros(n, dtype=x.dtype)
        for r in range(rows):
            mu = mean[r]
            inv = rstd[r]
            a = 0.0
            b = 0.0
            for c in range(n):
                xh = (x[r, c] - mu) * inv
                gx = g[r, c] * gamma[c]
                a += gx
                b += gx * xh
                dgamma[c] += g[r, c] * xh
                dbeta[c] += g[r, c]
            a /= n
            b /= n
            for c in range(n):
                xh = (x[r, c] - mu) * inv
                dx[r, c] = (g[r, c] * gamma[c] - a - xh * b) * inv
        return dx, dgamma, dbeta

    @njit(cache=True)
    def nb_softmax_fwd(x):
        rows, n = x.shape
        y = np.empty_like(x)
        for r in range(rows):
            m = x[r, 0]
            for c in range(1, n):
                if x[r, c] > m:
                    m = x[r, c]
            s = 0.0
            for c in range(n):
                e = math.exp(x[r, c] - m)
                y[r, c] = e
                s += e
            for c in range(n):
                y[r, c] /= s
        return y

    @njit(cache=True)
    def nb_softmax_bwd(y, g):
        rows, n = y.shape
        dx = np.empty_like(y)
        for r in range(rows):
            s = 0.0
            for c in range(n):
                s += g[r, c] * y[r, c]
            for c in range(n):
                dx[r, c] = y[r, c] * (g[r, c] - s)
        return dx

    @njit(cache=True)
    def nb_gelu_fwd(x):
        rows, n = x.shape
        y = np.empty_like(x)
        for r in range(rows):
            for c in range(n):
                v = x[r, c]
                y[r, c] = 0.5 * v * (1.0 + math.erf(v * _SQRT_HALF))
        return y

    @njit(cache=True)
    def nb_gelu_bwd(x, g):
        rows, n = x.shape
        dx = np.empty_like(x)
        for r in range(rows):
            for c in range(n):
                v = x[r, c]
                cdf = 0.5 * (1.0 + math.erf(v * _SQRT_HALF))
                pdf = math.exp(-0.5 * v * v) * _INV_SQRT_2PI
                dx[r, c] = g[r, c] * (cdf + v * pdf)
        return dx

    @njit(cache=True)
    def nb_scatter_add_rows(out, idx, src):
        n = src.shape[1]
        for i in range(idx.shape[0]):
            j = idx[i]
            for c in range(n):
                out[j, c] += src[i, c]
        return out


def _want_numba() -> bool:
    flag = os.environ.get("MAFORMER_NUMBA", "1").strip().lower()
    return HAS_NUMBA and flag not in ("0", "false", "no", "off")


USE_NUMBA = _want_numba()
BACKEND = "numba" if USE_NUMBA else "numpy"

if USE_NUMBA:
    layer_norm_fwd = nb_layer_norm_fwd
    layer_norm_bwd = nb_layer_norm_bwd
    softmax_fwd = nb_softmax_fwd
    softmax_bwd = nb_softmax_bwd
    gelu_fwd = nb_gelu_fwd
    gelu_bwd = nb_gelu_bwd
    scatter_add_rows = nb_scatter_add_rows
else:
    layer_norm_fwd = np_layer_norm_fwd
    layer_norm_bwd = np_layer_norm_bwd
    softmax_fwd = np_softmax_fwd
    softmax_bwd = np_softmax_bwd
    gelu_fwd = np_gelu_fwd
    gelu_bwd = np_gelu_bwd
    scatter_add_rows = np_scatter_add_rows
