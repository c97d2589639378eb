"""Central-difference gradient checking along random directions."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def directional_check(fn, tensors, rng, h=1e-6, n_dirs=2):
    """Compare analytic and numeric directional derivatives of ``fn``.

    ``fn()`` must rebuild the graph from ``tensors`` (leaves with
    ``requires_grad``) and return a Tensor; it is reduced to a scalar with a
    fixed random projection. Returns the worst relative error seen.
    """
    with_probe = fn()
    proj = rng.standard_normal(with_probe.shape)

    def scalar():
        return float(np.sum(fn().data * proj))

    worst = 0.0
    for _ in range(n_dirs):
        for t in tensors:
            t.grad = None
        out = fn()
        (out * proj).sum().backward()
        dirs = [rng.standard_normal(t.shape) for t in tensors]
        analytic = sum(float(np.sum(t.grad * d)) for t, d in zip(tensors, dirs) if t.grad is not None)
        base = [t.data.copy() for t in tensors]
        for t, b, d in zip(tensors, base, dirs):
            t.data = b + h * d
        fp = scalar()
        for t, b, d in zip(tensors, base, dirs):
            t.data = b - h * d
        fm = scalar()
        for t, b in zip(tensors, base):
            t.data = b
        numeric = (fp - fm) / (2 * h)
        worst = max(worst, relative_error(analytic, numeric))
    for t in tensors:
        t.grad = None
    return worst


def relative_error(a, b, atol=1e-9):
    diff = abs(a - b)
    if diff <= atol:
        return 0.0
    return diff / max(abs(a), abs(b))


def leaf(x):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)
