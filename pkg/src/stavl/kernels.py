"""Convolution kernels used by the local spatio-temporal encoder.

Each op has a numba loop kernel and a vectorised numpy twin. The public
functions dispatch on :func:`stavl._accel.backend`. Arrays are laid out
``[B, T, h, w, C]`` and every convolution is zero padded ("same").
"""

import numpy as np

from ._accel import backend, njit

# ---------------------------------------------------------------------------
# temporal (3, 1, 1) convolution with full channel mixing
# ---------------------------------------------------------------------------


def _tconv_fwd_np(x, w, b):
    T = x.shape[1]
    xp = np.pad(x, ((0, 0), (1, 1), (0, 0), (0, 0), (0, 0)))
    y = xp[:, 0:T] @ w[0]
    y += xp[:, 1:T + 1] @ w[1]
    y += xp[:, 2:T + 2] @ w[2]
    y += b
    return y


def _tconv_bwd_np(dy, x, w):
    T = x.shape[1]
    cin = x.shape[-1]
    xp = np.pad(x, ((0, 0), (1, 1), (0, 0), (0, 0), (0, 0)))
    dyf = dy.reshape(-1, dy.shape[-1])
    dw = np.empty_like(w)
    for k in range(3):
        dw[k] = xp[:, k:k + T].reshape(-1, cin).T @ dyf
    dxp = np.zeros_like(xp)
    for k in range(3):
        dxp[:, k:k + T] += dy @ w[k].T
    db = dyf.sum(axis=0)
    return dxp[:, 1:T + 1], dw, db


@njit
def _tconv_fwd_nb(x, w, b):
    B, T, H, W, C = x.shape
    O = w.shape[2]
    y = np.empty((B, T, H, W, O))
    for n in range(B):
        for t in range(T):
            for i in range(H):
                for j in range(W):
                    row = y[n, t, i, j]
                    for o in range(O):
                        row[o] = b[o]
                    for k in range(3):
                        tt = t + k - 1
                        if tt < 0 or tt >= T:
                            continue
                        # output channels innermost: contiguous in both w and y
                        for c in range(C):
                            v = x[n, tt, i, j, c]
                            for o in range(O):
                                row[o] += v * w[k, c, o]
    return y


@njit
def _tconv_bwd_nb(dy, x, w):
    B, T, H, W, C = x.shape
    O = w.shape[2]
    dx = np.zeros((B, T, H, W, C))
    dw = np.zeros((3, C, O))
    db = np.zeros(O)
    for n in range(B):
        for t in range(T):
            for i in range(H):
                for j in range(W):
                    g = dy[n, t, i, j]
                    for o in range(O):
                        db[o] += g[o]
                    for k in range(3):
                        tt = t + k - 1
                        if tt < 0 or tt >= T:
                            continue
                        for c in range(C):
                            v = x[n, tt, i, j, c]
                            acc = 0.0
                            for o in range(O):
                                dw[k, c, o] += v * g[o]
                                acc += w[k, c, o] * g[o]
                            dx[n, tt, i, j, c] += acc
    return dx, dw, db


# ---------------------------------------------------------------------------
# depthwise (3, 3, 3) convolution
# ---------------------------------------------------------------------------


def _dw_fwd_np(x, w, b):
    _, T, H, W, _ = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    y = np.zeros_like(x)
    for a in range(3):
        for e in range(3):
            for f in range(3):
                y += w[a, e, f] * xp[:, a:a + T, e:e + H, f:f + W]
    y += b
    return y


def _dw_bwd_np(dy, x, w):
    _, T, H, W, C = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    for a in range(3):
        for e in range(3):
            for f in range(3):
                win = (slice(None), slice(a, a + T), slice(e, e + H), slice(f, f + W))
                dw[a, e, f] = (xp[win] * dy).reshape(-1, C).sum(axis=0)
                dxp[win] += w[a, e, f] * dy
    db = dy.reshape(-1, C).sum(axis=0)
    return dxp[:, 1:T + 1, 1:H + 1, 1:W + 1], dw, db


@njit
def _dw_fwd_nb(x, w, b):
    B, T, H, W, C = x.shape
    y = np.empty_like(x)
    for n in range(B):
        for t in range(T):
            for i in range(H):
                for j in range(W):
                    for c in range(C):
                        acc = b[c]
                        for a in range(3):
                            tt = t + a - 1
                            if tt < 0 or tt >= T:
                                continue
                            for e in range(3):
                                ii = i + e - 1
                                if ii < 0 or ii >= H:
                                    continue
                                for f in range(3):
                                    jj = j + f - 1
                                    if jj < 0 or jj >= W:
                                        continue
                                    acc += w[a, e, f, c] * x[n, tt, ii, jj, c]
                        y[n, t, i, j, c] = acc
    return y


@njit
def _dw_bwd_nb(dy, x, w):
    B, T, H, W, C = x.shape
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    db = np.zeros(C)
    for n in range(B):
        for t in range(T):
            for i in range(H):
                for j in range(W):
                    for c in range(C):
                        g = dy[n, t, i, j, c]
                        db[c] += g
                        for a in range(3):
                            tt = t + a - 1
                            if tt < 0 or tt >= T:
                                continue
                            for e in range(3):
                                ii = i + e - 1
                                if ii < 0 or ii >= H:
                                    continue
                                for f in range(3):
                                    jj = j + f - 1
                                    if jj < 0 or jj >= W:
                                        continue
                                    dw[a, e, f, c] += x[n, tt, ii, jj, c] * g
                                    dx[n, tt, ii, jj, c] += w[a, e, f, c] * g
    return dx, dw, db


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def tconv3_forward(x, w, b):
    """Temporal conv, kernel (3,1,1). ``w`` is ``[3, C_in, C_out]``, tap k reads frame t+k-1."""
    if backend() == "numba" and x.dtype == np.float64:
        return _tconv_fwd_nb(_c(x), _c(w), _c(b))
    return _tconv_fwd_np(x, w, b)


def tconv3_backward(dy, x, w):
    if backend() == "numba" and x.dtype == np.float64:
        return _tconv_bwd_nb(_c(dy), _c(x), _c(w))
    return _tconv_bwd_np(dy, x, w)


def dwconv3_forward(x, w, b):
    """Depthwise conv, kernel (3,3,3). ``w`` is ``[3, 3, 3, C]``."""
    if backend() == "numba" and x.dtype == np.float64:
        return _dw_fwd_nb(_c(x), _c(w), _c(b))
    return _dw_fwd_np(x, w, b)


def dwconv3_backward(dy, x, w):
    if backend() == "numba" and x.dtype == np.float64:
        return _dw_bwd_nb(_c(dy), _c(x), _c(w))
    return _dw_bwd_np(dy, x, w)


# ---------------------------------------------------------------------------
# tanh-approximated GELU
# ---------------------------------------------------------------------------

_GELU_C = 0.7978845608028654  # sqrt(2 / pi)
_GELU_A = 0.044715


def _gelu_fwd_np(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x * x * x)))


def _gelu_bwd_np(dy, x):
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * x2 * x))
    du = _GELU_C * (1.0 + 3 * _GELU_A * x2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


@njit
def _gelu_fwd_nb(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        # 0.5 v (1 + tanh u) == v - v / (exp(2u) + 1); exp is much cheaper than tanh here
        out[i] = v - v / (np.exp(2.0 * _GELU_C * (v + _GELU_A * v * v * v)) + 1.0)
    return out.reshape(x.shape)


@njit
def _gelu_bwd_nb(dy, x):
    fx = x.ravel()
    fd = dy.ravel()
    out = np.empty_like(fx)
    for i in range(fx.size):
        v = fx[i]
        t = 1.0 - 2.0 / (np.exp(2.0 * _GELU_C * (v + _GELU_A * v * v * v)) + 1.0)
        du = _GELU_C * (1.0 + 3 * _GELU_A * v * v)
        out[i] = fd[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
    return out.reshape(x.shape)


def gelu_forward(x):
    if backend() == "numba" and x.dtype == np.float64:
        return _gelu_fwd_nb(np.ascontiguousarray(x))
    return _gelu_fwd_np(x)


def gelu_backward(dy, x):
    if backend() == "numba" and x.dtype == np.float64 and dy.dtype == np.float64:
        dy, x = np.broadcast_arrays(dy, x)
        return _gelu_bwd_nb(np.ascontiguousarray(dy), np.ascontiguousarray(x))
    return _gelu_bwd_np(dy, x)
