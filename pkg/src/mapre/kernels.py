"""Fused row kernels used by the autodiff primitives.

Every kernel works on a 2-D float64 array whose rows are the last axis of
the caller's tensor.  Two implementations exist for each kernel: a loop
version compiled with numba and a vectorized numpy version.  The loop
versions are plain Python when numba is disabled, so both paths stay
importable; :data:`BACKEND` names the one bound to the public names.
"""

import math

import numpy as np

from mapre._accel import HAS_NUMBA, backend, njit

BACKEND = backend()

_GELU_C = math.sqrt(2.0 / math.pi)


# --------------------------------------------------------------------------
# numpy path
# --------------------------------------------------------------------------


def np_softmax_rows(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def np_log_softmax_rows(x):
    m = x.max(axis=1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def np_softmax_rows_backward(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def np_log_softmax_rows_backward(logp, g):
    return g - np.exp(logp) * g.sum(axis=1, keepdims=True)


def np_layer_norm_rows(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def np_layer_norm_rows_backward(g, xhat, rstd, gain):
    n = xhat.shape[1]
    dgain = (g * xhat).sum(axis=0)
    dbias = g.sum(axis=0)
    gx = g * gain
    dx = (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).sum(axis=1, keepdims=True) / n)
    return dx * rstd[:, None], dgain, dbias


def np_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def np_gelu_backward(x, g):
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


# --------------------------------------------------------------------------
# loop path (numba)
# --------------------------------------------------------------------------


@njit
def nb_softmax_rows(x):
    r, c = x.shape
    out = np.empty((r, c))
    for i in range(r):
        m = x[i, 0]
        for j in range(1, c):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(c):
            e = math.exp(x[i, j] - m)
            out[i, j] = e
            s += e
        for j in range(c):
            out[i, j] /= s
    return out


@njit
def nb_log_softmax_rows(x):
    r, c = x.shape
    out = np.empty((r, c))
    for i in range(r):
        m = x[i, 0]
        for j in range(1, c):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(c):
            s += math.exp(x[i, j] - m)
        ls = math.log(s)
        for j in range(c):
            out[i, j] = x[i, j] - m - ls
    return out


@njit
def nb_softmax_rows_backward(y, g):
    r, c = y.shape
    out = np.empty((r, c))
    for i in range(r):
        s = 0.0
        for j in range(c):
            s += g[i, j] * y[i, j]
        for j in range(c):
            out[i, j] = y[i, j] * (g[i, j] - s)
    return out


@njit
def nb_log_softmax_rows_backward(logp, g):
    r, c = logp.shape
    out = np.empty((r, c))
    for i in range(r):
        s = 0.0
        for j in range(c):
            s += g[i, j]
        for j in range(c):
            out[i, j] = g[i, j] - math.exp(logp[i, j]) * s
    return out


@njit
def nb_layer_norm_rows(x, gain, bias, eps):
    r, c = x.shape
    y = np.empty((r, c))
    xhat = np.empty((r, c))
    rstd = np.empty(r)
    for i in range(r):
        mu = 0.0
        for j in range(c):
            mu += x[i, j]
        mu /= c
        var = 0.0
        for j in range(c):
            d = x[i, j] - mu
            var += d * d
        var /= c
        rs = 1.0 / math.sqrt(var + eps)
        rstd[i] = rs
        for j in range(c):
            xh = (x[i, j] - mu) * rs
            xhat[i, j] = xh
            y[i, j] = xh * gain[j] + bias[j]
    return y, xhat, rstd


@njit
def nb_layer_norm_rows_backward(g, xhat, rstd, gain):
    r, c = g.shape
    dx = np.empty((r, c))
    dgain = np.zeros(c)
    dbias = np.zeros(c)
    for i in range(r):
        s1 = 0.0
        s2 = 0.0
        for j in range(c):
            gx = g[i, j] * gain[j]
            s1 += gx
            s2 += gx * xhat[i, j]
            dgain[j] += g[i, j] * xhat[i, j]
            dbias[j] += g[i, j]
        s1 /= c
        s2 /= c
        for j in range(c):
            dx[i, j] = (g[i, j] * gain[j] - s1 - xhat[i, j] * s2) * rstd[i]
    return dx, dgain, dbias


@njit
def nb_gelu(x):
    flat = x.ravel()
    out = np.empty(flat.size)
    for k in range(flat.size):
        v = flat[k]
        out[k] = 0.5 * v * (1.0 + math.tanh(_GELU_C * (v + 0.044715 * v * v * v)))
    return out.reshape(x.shape)


@njit
def nb_gelu_backward(x, g):
    xf = x.ravel()
    gf = g.ravel()
    out = np.empty(xf.size)
    for k in range(xf.size):
        v = xf[k]
        t = math.tanh(_GELU_C * (v + 0.044715 * v * v * v))
        dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
        out[k] = gf[k] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
    return out.reshape(x.shape)


if HAS_NUMBA:
    softmax_rows = nb_softmax_rows
    log_softmax_rows = nb_log_softmax_rows
    softmax_rows_backward = nb_softmax_rows_backward
    log_softmax_rows_backward = nb_log_softmax_rows_backward
    layer_norm_rows = nb_layer_norm_rows
    layer_norm_rows_backward = nb_layer_norm_rows_backward
    gelu = nb_gelu
    gelu_backward = nb_gelu_backward
else:
    softmax_rows = np_softmax_rows
    log_softmax_rows = np_log_softmax_rows
    softmax_rows_backward = np_softmax_rows_backward
    log_softmax_rows_backward = np_log_softmax_rows_backward
    layer_norm_rows = np_layer_norm_rows
    layer_norm_rows_backward = np_layer_norm_rows_backward
    gelu = np_gelu
    gelu_backward = np_gelu_backward
