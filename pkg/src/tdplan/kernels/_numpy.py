"""Pure-numpy reference kernels.

Every function here has a twin in ``_numba.py`` with the same signature and
the same results up to floating-point reassociation.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv1d_forward(x, w, b):
    """Same-padded temporal convolution on channels-last input.

    x: (B, T, Ci), w: (k, Ci, Co), b: (Co,). Returns (y, cols) where cols is
    the (B*T, k*Ci) im2col buffer reused by the backward pass.
    """
    B, T, Ci = x.shape
    k, _, Co = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (0, 0)))
    # (B, T, Ci, k) -> (B, T, k, Ci)
    win = sliding_window_view(xp, k, axis=1).transpose(0, 1, 3, 2)
    cols = np.ascontiguousarray(win).reshape(B * T, k * Ci)
    y = cols @ w.reshape(k * Ci, Co) + b
    return y.reshape(B, T, Co), cols


def conv1d_backward(gy, cols, w, x_shape):
    B, T, Ci = x_shape
    k, _, Co = w.shape
    p = k // 2
    g2 = gy.reshape(B * T, Co)
    gw = (cols.T @ g2).reshape(k, Ci, Co)
    gb = g2.sum(axis=0)
    gcols = (g2 @ w.reshape(k * Ci, Co).T).reshape(B, T, k, Ci)
    gxp = np.zeros((B, T + 2 * p, Ci))
    for j in range(k):
        gxp[:, j:j + T, :] += gcols[:, :, j, :]
    return gxp[:, p:p + T, :], gw, gb


def layer_norm_forward(x, eps):
    """Row normalisation over the last axis of a 2-D array."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[:, 0]


def layer_norm_backward(gxhat, xhat, rstd):
    n = xhat.shape[1]
    m1 = gxhat.sum(axis=1, keepdims=True) / n
    m2 = (gxhat * xhat).sum(axis=1, keepdims=True) / n
    return rstd[:, None] * (gxhat - m1 - xhat * m2)


def group_norm_forward(x, groups, eps):
    """x: (B, T, C). Statistics pooled over T and the C//groups channels."""
    B, T, C = x.shape
    xg = x.reshape(B, T, groups, C // groups)
    mu = xg.mean(axis=(1, 3), keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=(1, 3), keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (xc * rstd).reshape(B, T, C)
    return xhat, rstd.reshape(B, groups)


def group_norm_backward(gxhat, xhat, rstd, groups):
    B, T, C = xhat.shape
    cg = C // groups
    n = T * cg
    gg = gxhat.reshape(B, T, groups, cg)
    xg = xhat.reshape(B, T, groups, cg)
    m1 = gg.sum(axis=(1, 3), keepdims=True) / n
    m2 = (gg * xg).sum(axis=(1, 3), keepdims=True) / n
    gx = rstd[:, None, :, None] * (gg - m1 - xg * m2)
    return gx.reshape(B, T, C)


def _mish_parts(x):
    # tanh(softplus(x)) = n / (n + 2), n = e^x (e^x + 2); e^x capped where the ratio rounds to 1
    e = np.exp(np.minimum(x, 20.0))
    n = e * (e + 2.0)
    return e, n / (n + 2.0)


def mish_forward(x):
    return x * _mish_parts(x)[1]


def mish_backward(g, x):
    e, t = _mish_parts(x)
    return g * (t + x * (1.0 - t * t) * (e / (1.0 + e)))


def masked_softmax_forward(s, mask):
    """Softmax over the last axis of (N, T, T) scores; mask is (N, T, T) bool.

    Each row must keep at least one entry.
    """
    z = np.where(mask, s, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax_backward(g, p):
    return p * (g - (g * p).sum(axis=-1, keepdims=True))


def move_axis(pos, delta, lo, hi, wall_coord, wall_lo, wall_hi, other, margin):
    """Move one coordinate by ``delta`` against axis-aligned barriers.

    Barrier i sits at ``wall_coord[i]`` and spans ``[wall_lo[i], wall_hi[i]]``
    along the other axis; it only applies if ``other`` falls in that span.
    Motion stops ``margin`` short of the first barrier crossed and is clipped
    to ``[lo, hi]``.
    """
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
