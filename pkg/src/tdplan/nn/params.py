"""Named parameter storage and the Adam optimiser."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, DimensionError, UsageError
from .tensor import Tensor


class ParamStore:
    """Ordered mapping name -> parameter Tensor, plus Adam moment buffers."""

    def __init__(self):
        self._values = {}
        self._m = {}
        self._v = {}

    def add(self, name, value):
        if name in self._values:
            raise UsageError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=np.float64)
        t = Tensor(value, requires_grad=True, op="param")
        self._values[name] = t
        self._m[name] = np.zeros_like(value)
        self._v[name] = np.zeros_like(value)
        return t

    def __getitem__(self, name) -> Tensor:
        return self._values[name]

    def __contains__(self, name):
        return name in self._values

    def __len__(self):
        return len(self._values)

    def names(self):
        return list(self._values)

    def items(self):
        return self._values.items()

    def moments(self, name):
        return self._m[name], self._v[name]

    def n_params(self):
        return int(sum(t.data.size for t in self._values.values()))

    def zero_grad(self):
        for t in self._values.values():
            t.grad = None

    def grad_norm(self):
        tot = 0.0
        for t in self._values.values():
            if t.grad is not None:
                tot += float(np.sum(t.grad * t.grad))
        return float(np.sqrt(tot))

    def clip_grad_norm(self, max_norm):
        norm = self.grad_norm()
        if max_norm is not None and norm > max_norm:
            scale = max_norm / (norm + 1e-12)
            for t in self._values.values():
                if t.grad is not None:
                    t.grad *= scale
        return norm

    def state_dict(self):
        return {name: t.data.copy() for name, t in self._values.items()}

    def load_state_dict(self, arrays, strict=True):
        missing = set(self._values) - set(arrays)
        extra = set(arrays) - set(self._values)
        if strict and (missing or extra):
            raise DimensionError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in arrays.items():
            if name not in self._values:
                continue
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != self._values[name].shape:
                raise DimensionError(f"{name}: shape {arr.shape} != {self._values[name].shape}")
            self._values[name].data = arr.copy()


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")


def adam_step(store: ParamStore, cfg: AdamConfig, step: int) -> ParamStore:
    """Apply one bias-corrected Adam update in place and zero the gradients.

    ``step`` counts from 1. Entries without a gradient are treated as having
    a zero gradient.
    """
    if step < 1:
        raise UsageError("Adam step counter starts at 1")
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name, t in store.items():
        m, v = store.moments(name)
        g = t.grad if t.grad is not None else 0.0
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        t.data -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
        t.grad = None
    return store
