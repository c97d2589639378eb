"""Parameterised layers.

Layers are plain functions over a :class:`ParamStore` and a name prefix; the
matching ``init_*`` function creates the entries. Weights are drawn from
N(0, 1/fan_in), biases start at zero.
"""
from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigError, DimensionError
from . import tensor as T
from .params import ParamStore


def _normal(rng, shape, fan_in):
    return rng.standard_normal(shape) / math.sqrt(fan_in)


def init_linear(store: ParamStore, name, n_in, n_out, rng, bias=True):
    store.add(f"{name}.weight", _normal(rng, (n_in, n_out), n_in))
    if bias:
        store.add(f"{name}.bias", np.zeros(n_out))


def linear(x, store: ParamStore, name):
    """y = x W + b over the last axis of ``x``."""
    x = T.as_tensor(x)
    w = store[f"{name}.weight"]
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"{name}: input dim {x.shape[-1]} != weight input dim {w.shape[0]}")
    y = x @ w
    bname = f"{name}.bias"
    if bname in store:
        y = y + store[bname]
    return y


def init_norm(store: ParamStore, name, dim):
    store.add(f"{name}.gamma", np.ones(dim))
    store.add(f"{name}.beta", np.zeros(dim))


def layer_norm(x, store: ParamStore, name, eps=1e-5):
    return T.layer_norm(T.as_tensor(x), store[f"{name}.gamma"], store[f"{name}.beta"], eps)


def norm_groups(channels, groups):
    return math.gcd(channels, groups)


def group_norm(x, store: ParamStore, name, groups, eps=1e-5):
    return T.group_norm(x, norm_groups(x.shape[-1], groups),
                        store[f"{name}.gamma"], store[f"{name}.beta"], eps)


def init_conv1d(store: ParamStore, name, c_in, c_out, kernel, rng):
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigError(f"{name}: temporal kernel must be odd, got {kernel}")
    store.add(f"{name}.weight", _normal(rng, (kernel, c_in, c_out), kernel * c_in))
    store.add(f"{name}.bias", np.zeros(c_out))


def conv1d_temporal(x, store: ParamStore, name):
    """Same-length temporal convolution of (B, T, C_in) or (T, C_in) input."""
    x = T.as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    w = store[f"{name}.weight"]
    if w.shape[0] % 2 == 0:
        raise ConfigError(f"{name}: temporal kernel must be odd, got {w.shape[0]}")
    y = T.conv1d(x, w, store[f"{name}.bias"])
    return y.reshape(y.shape[1:]) if squeeze else y


def causal_mask(n):
    return np.tril(np.ones((n, n), dtype=bool))


def init_attention(store: ParamStore, name, dim, rng):
    init_linear(store, f"{name}.qkv", dim, 3 * dim, rng)
    init_linear(store, f"{name}.proj", dim, dim, rng)


def causal_self_attention(x, store: ParamStore, name, n_heads, key_mask=None):
    """Multi-head self-attention where position t only sees positions <= t.

    ``key_mask`` (B, T) marks real tokens; padded keys are hidden from every
    query, and a padded query attends only to itself.
    """
    x = T.as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    B, n, d = x.shape
    if d % n_heads:
        raise ConfigError(f"embedding dim {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    qkv = linear(x, store, f"{name}.qkv").reshape(B, n, 3, n_heads, dh)
    qkv = qkv.transpose(2, 0, 3, 1, 4)  # (3, B, h, n, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    mask = causal_mask(n)[None, None]
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)[:, None, None, :]
        mask = (mask & km) | np.eye(n, dtype=bool)[None, None]
    att = T.masked_softmax(scores, mask)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
    out = linear(out, store, f"{name}.proj")
    return out.reshape(n, d) if squeeze else out


ACTIVATIONS = {
    "relu": T.relu,
    "mish": T.mish,
    "gelu": T.gelu,
}


def activation(name):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown activation {name!r}") from None


def sinusoidal_embedding(steps, dim):
    """Fixed sin/cos features of integer diffusion steps, shape (len(steps), dim)."""
    steps = np.asarray(steps, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    arg = steps[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)
