"""Numba-compiled twins of the kernels in ``_numpy.py``.

No fastmath: gradient checks and reproducibility need IEEE semantics.
"""
import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True)


@njit(**_JIT)
def conv1d_forward(x, w, b):
    B, T, Ci = x.shape
    k, _, Co = w.shape
    p = k // 2
    cols = np.zeros((B * T, k * Ci))
    for bi in range(B):
        for t in range(T):
            row = bi * T + t
            for j in range(k):
                src = t + j - p
                if 0 <= src < T:
                    for c in range(Ci):
                        cols[row, j * Ci + c] = x[bi, src, c]
    w2 = np.ascontiguousarray(w).reshape(k * Ci, Co)
    y = np.dot(cols, w2)
    for r in range(B * T):
        for o in range(Co):
            y[r, o] += b[o]
    return y.reshape(B, T, Co), cols


@njit(**_JIT)
def conv1d_backward(gy, cols, w, x_shape):
    B, T, Ci = x_shape
    k, _, Co = w.shape
    p = k // 2
    g2 = np.ascontiguousarray(gy).reshape(B * T, Co)
    w2 = np.ascontiguousarray(w).reshape(k * Ci, Co)
    gw = np.dot(cols.T, g2).reshape(k, Ci, Co)
    gb = np.zeros(Co)
    for r in range(B * T):
        for o in range(Co):
            gb[o] += g2[r, o]
    gcols = np.dot(g2, w2.T)
    gx = np.zeros((B, T, Ci))
    for bi in range(B):
        for t in range(T):
            row = bi * T + t
            for j in range(k):
                dst = t + j - p
                if 0 <= dst < T:
                    for c in range(Ci):
                        gx[bi, dst, c] += gcols[row, j * Ci + c]
    return gx, gw, gb


@njit(**_JIT)
def layer_norm_forward(x, eps):
    N, D = x.shape
    xhat = np.empty((N, D))
    rstd = np.empty(N)
    for i in range(N):
        mu = 0.0
        for j in range(D):
            mu += x[i, j]
        mu /= D
        var = 0.0
        for j in range(D):
            d = x[i, j] - mu
            var += d * d
        var /= D
        r = 1.0 / np.sqrt(var + eps)
        rstd[i] = r
        for j in range(D):
            xhat[i, j] = (x[i, j] - mu) * r
    return xhat, rstd


@njit(**_JIT)
def layer_norm_backward(gxhat, xhat, rstd):
    N, D = xhat.shape
    gx = np.empty((N, D))
    for i in range(N):
        m1 = 0.0
        m2 = 0.0
        for j in range(D):
            m1 += gxhat[i, j]
            m2 += gxhat[i, j] * xhat[i, j]
        m1 /= D
        m2 /= D
        for j in range(D):
            gx[i, j] = rstd[i] * (gxhat[i, j] - m1 - xhat[i, j] * m2)
    return gx


@njit(**_JIT)
def group_norm_forward(x, groups, eps):
    B, T, C = x.shape
    cg = C // groups
    n = T * cg
    xhat = np.empty((B, T, C))
    rstd = np.empty((B, groups))
    for bi in range(B):
        for g in range(groups):
            c0 = g * cg
            mu = 0.0
            for t in range(T):
                for c in range(c0, c0 + cg):
                    mu += x[bi, t, c]
            mu /= n
            var = 0.0
            for t in range(T):
                for c in range(c0, c0 + cg):
                    d = x[bi, t, c] - mu
                    var += d * d
            var /= n
            r = 1.0 / np.sqrt(var + eps)
            rstd[bi, g] = r
            for t in range(T):
                for c in range(c0, c0 + cg):
                    xhat[bi, t, c] = (x[bi, t, c] - mu) * r
    return xhat, rstd


@njit(**_JIT)
def group_norm_backward(gxhat, xhat, rstd, groups):
    B, T, C = xhat.shape
    cg = C // groups
    n = T * cg
    gx = np.empty((B, T, C))
    for bi in range(B):
        for g in range(groups):
            c0 = g * cg
            m1 = 0.0
            m2 = 0.0
            for t in range(T):
                for c in range(c0, c0 + cg):
                    m1 += gxhat[bi, t, c]
                    m2 += gxhat[bi, t, c] * xhat[bi, t, c]
            m1 /= n
            m2 /= n
            r = rstd[bi, g]
            for t in range(T):
                for c in range(c0, c0 + cg):
                    gx[bi, t, c] = r * (gxhat[bi, t, c] - m1 - xhat[bi, t, c] * m2)
    return gx


# tanh(softplus(v)) = n / (n + 2) with n = e^v (e^v + 2); one exp per element.
# e^v is capped at e^20 where tanh(softplus) already rounds to 1.
@njit(**_JIT)
def mish_forward(x):
    flat = np.ascontiguousarray(x).ravel()
    out = np.empty(flat.size)
    for i in range(flat.size):
        v = flat[i]
        e = np.exp(min(v, 20.0))
        n = e * (e + 2.0)
        out[i] = v * n / (n + 2.0)
    return out.reshape(x.shape)


@njit(**_JIT)
def mish_backward(g, x):
    fx = np.ascontiguousarray(x).ravel()
    fg = np.ascontiguousarray(g).ravel()
    out = np.empty(fx.size)
    for i in range(fx.size):
        v = fx[i]
        e = np.exp(min(v, 20.0))
        n = e * (e + 2.0)
        t = n / (n + 2.0)
        sig = e / (1.0 + e)
        out[i] = fg[i] * (t + v * (1.0 - t * t) * sig)
    return out.reshape(x.shape)


@njit(**_JIT)
def masked_softmax_forward(s, mask):
    N, T, S = s.shape
    p = np.zeros((N, T, S))
    for n in range(N):
        for i in range(T):
            m = -np.inf
            for j in range(S):
                if mask[n, i, j] and s[n, i, j] > m:
                    m = s[n, i, j]
            tot = 0.0
            for j in range(S):
                if mask[n, i, j]:
                    e = np.exp(s[n, i, j] - m)
                    p[n, i, j] = e
                    tot += e
            for j in range(S):
                p[n, i, j] /= tot
    return p


@njit(**_JIT)
def masked_softmax_backward(g, p):
    N, T, S = p.shape
    gs = np.empty((N, T, S))
    for n in range(N):
        for i in range(T):
            dot = 0.0
            for j in range(S):
                dot += g[n, i, j] * p[n, i, j]
            for j in range(S):
                gs[n, i, j] = p[n, i, j] * (g[n, i, j] - dot)
    return gs


@njit(**_JIT)
def move_axis(pos, delta, lo, hi, wall_coord, wall_lo, wall_hi, other, margin):
    target = pos + delta
    if delta > 0.0:
        for i in range(wall_coord.shape[0]):
            c = wall_coord[i]
            if wall_lo[i] <= other <= wall_hi[i] and pos < c <= target + margin:
                target = min(target, c - margin)
    elif delta < 0.0:
        for i in range(wall_coord.shape[0]):
            c = wall_coord[i]
            if wall_lo[i] <= other <= wall_hi[i] and target - margin <= c < pos:
                target = max(target, c + margin)
    return min(max(target, lo), hi)
