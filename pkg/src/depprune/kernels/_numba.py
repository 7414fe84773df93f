"""numba-compiled versions of the fused row kernels.

Same signatures and math as ``_numpy``; results agree to rounding.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def rmsnorm_fwd(x, w, eps):
    n, d = x.shape
    y = np.empty_like(x)
    inv = np.empty(n)
    for i in range(n):
        acc = 0.0
        for j in range(d):
            acc += x[i, j] * x[i, j]
        r = 1.0 / math.sqrt(acc / d + eps)
        inv[i] = r
        for j in range(d):
            y[i, j] = x[i, j] * r * w[j]
    return y, inv


@njit(cache=True)
def rmsnorm_bwd(gy, x, w, inv):
    n, d = x.shape
    gx = np.empty_like(x)
    gw = np.zeros(d)
    for i in range(n):
        r = inv[i]
        proj = 0.0
        for j in range(d):
            xh = x[i, j] * r
            gw[j] += gy[i, j] * xh
            proj += gy[i, j] * w[j] * xh
        proj /= d
        for j in range(d):
            gx[i, j] = r * (gy[i, j] * w[j] - x[i, j] * r * proj)
    return gx, gw


@njit(cache=True)
def _softmax_rows(x, allowed, use_mask):
    b, t, s = x.shape
    p = np.zeros_like(x)
    for k in range(b):
        for i in range(t):
            m = -np.inf
            for j in range(s):
                if (not use_mask or allowed[k, i, j]) and x[k, i, j] > m:
                    m = x[k, i, j]
            tot = 0.0
            for j in range(s):
                if not use_mask or allowed[k, i, j]:
                    e = math.exp(x[k, i, j] - m)
                    p[k, i, j] = e
                    tot += e
            for j in range(s):
                p[k, i, j] /= tot
    return p


def softmax_fwd(x, allowed):
    if allowed is None:
        return _softmax_rows(x, np.ones((1, 1, 1), dtype=np.bool_), False)
    return _softmax_rows(x, np.ascontiguousarray(np.broadcast_to(allowed, x.shape)), True)


@njit(cache=True)
def softmax_bwd(gp, p):
    b, t, s = p.shape
    gx = np.empty_like(p)
    for k in range(b):
        for i in range(t):
            dot = 0.0
            for j in range(s):
                dot += gp[k, i, j] * p[k, i, j]
            for j in range(s):
                gx[k, i, j] = p[k, i, j] * (gp[k, i, j] - dot)
    return gx


@njit(cache=True)
def _sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@njit(cache=True)
def swiglu_fwd(g, u):
    y = np.empty_like(g)
    s = np.empty_like(g)
    gf = g.ravel()
    uf = u.ravel()
    yf = y.ravel()
    sf = s.ravel()
    for i in range(gf.size):
        si = _sigmoid(gf[i])
        sf[i] = si
        yf[i] = gf[i] * si * uf[i]
    return y, s


@njit(cache=True)
def swiglu_bwd(gy, g, u, s):
    gg = np.empty_like(g)
    gu = np.empty_like(g)
    gyf = gy.ravel()
    gf = g.ravel()
    uf = u.ravel()
    sf = s.ravel()
    ggf = gg.ravel()
    guf = gu.ravel()
    for i in range(gf.size):
        ggf[i] = gyf[i] * uf[i] * sf[i] * (1.0 + gf[i] * (1.0 - sf[i]))
        guf[i] = gyf[i] * gf[i] * sf[i]
    return gg, gu
