"""Pure-numpy reference kernels (always available)."""

import numpy as np


def rmsnorm_fwd(x, w, eps):
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=1) + eps)
    return x * inv[:, None] * w, inv


def rmsnorm_bwd(gy, x, w, inv):
    xhat = x * inv[:, None]
    gw = np.sum(gy * xhat, axis=0)
    gxhat = gy * w
    proj = np.mean(gxhat * xhat, axis=1)
    gx = inv[:, None] * (gxhat - xhat * proj[:, None])
    return gx, gw


def softmax_fwd(x, allowed):
    """Softmax over the last axis of a 3-d array; ``allowed`` is a bool mask or None."""
    if allowed is None:
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        z = np.where(allowed, x, -np.inf)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.where(allowed, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd(gp, p):
    return p * (gp - np.sum(gp * p, axis=-1, keepdims=True))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def swiglu_fwd(g, u):
    s = _sigmoid(g)
    return g * s * u, s


def swiglu_bwd(gy, g, u, s):
    gg = gy * u * s * (1.0 + g * (1.0 - s))
    gu = gy * g * s
    return gg, gu
