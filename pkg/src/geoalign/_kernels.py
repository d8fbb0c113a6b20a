"""Numba inner loops for the hottest elementwise paths.

Single fused passes for layer norm, GELU, and the Adam update; everything is
sequential and deterministic. Shapes are flattened by the callers.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def layer_norm_fwd(x, gain, bias, eps):
    n, d = x.shape
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    inv = np.empty(n)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        iv = 1.0 / math.sqrt(var + eps)
        inv[i] = iv
        for j in range(d):
            xh = (x[i, j] - mu) * iv
            xhat[i, j] = xh
            out[i, j] = xh * gain[j] + bias[j]
    return out, xhat, inv


@njit(cache=True)
def layer_norm_bwd(gout, xhat, inv, gain):
    n, d = gout.shape
    dx = np.empty_like(gout)
    dgain = np.zeros(d)
    dbias = np.zeros(d)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            go = gout[i, j]
            xh = xhat[i, j]
            dgain[j] += go * xh
            dbias[j] += go
            dxh = go * gain[j]
            m1 += dxh
            m2 += dxh * xh
        m1 /= d
        m2 /= d
        for j in range(d):
            dx[i, j] = inv[i] * (gout[i, j] * gain[j] - m1 - xhat[i, j] * m2)
    return dx, dgain, dbias


@njit(cache=True)
def adam_update(p, g, m, v, beta1, beta2, eps, bc1, bc2, lr):
    for i in range(p.size):
        mi = beta1 * m[i] + (1.0 - beta1) * g[i]
        vi = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / bc1) / (math.sqrt(vi / bc2) + eps)
