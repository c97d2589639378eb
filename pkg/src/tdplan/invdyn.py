"""Inverse dynamics: recover the action that moved the system from s to s'."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import nn
from .data import Normalizer, transitions
from .errors import ConfigError, DimensionError, UsageError
from .nn import layers as L
from .nn import tensor as T


@dataclass
class InvDynConfig:
    state_dim: int
    action_dim: int
    hidden: int = 128

    def __post_init__(self):
        if self.action_dim < 1:
            raise ConfigError("inverse dynamics needs action_dim >= 1")
        if self.state_dim < 1 or self.hidden < 1:
            raise ConfigError("state_dim and hidden must be >= 1")


class InvDynModel:
    """MLP over the concatenated normalised pair (s, s'), two ReLU hidden layers."""

    def __init__(self, config: InvDynConfig, seed=0):
        self.config = config
        self.store = nn.ParamStore()
        self.normalizer = None
        self.train_steps = 0
        rng = np.random.default_rng(seed)
        L.init_linear(self.store, "fc1", 2 * config.state_dim, config.hidden, rng)
        # zero biases put every first-layer kink at the origin, the densest part of normalised data
        self.store["fc1.bias"].data[:] = rng.uniform(-1.0, 1.0, config.hidden)
        L.init_linear(self.store, "fc2", config.hidden, config.hidden, rng)
        L.init_linear(self.store, "out", config.hidden, config.action_dim, rng)

    @property
    def trained(self):
        return self.train_steps > 0

    def __call__(self, s, s_next):
        s = np.asarray(s, dtype=np.float64)
        s_next = np.asarray(s_next, dtype=np.float64)
        d = self.config.state_dim
        if s.shape[-1] != d or s_next.shape != s.shape:
            raise DimensionError(f"expected matching (..., {d}) state pairs, got {s.shape} and {s_next.shape}")
        h = np.concatenate([s, s_next], axis=-1)
        h = T.relu(L.linear(h, self.store, "fc1"))
        h = T.relu(L.linear(h, self.store, "fc2"))
        return L.linear(h, self.store, "out")

    def predict_action(self, s, s_next):
        """Action estimate from normalised states (single pair or batch)."""
        with nn.no_grad():
            return self(s, s_next).data

    def meta(self):
        meta = {"kind": "invdyn", "config": asdict(self.config), "train_steps": self.train_steps}
        if self.normalizer is not None:
            meta["normalizer"] = self.normalizer.to_meta()
        return meta

    def save(self, path):
        nn.save_checkpoint(path, self.store, self.meta())

    @classmethod
    def load(cls, path):
        arrays, meta = nn.load_checkpoint(path)
        if meta.get("kind") != "invdyn":
            raise UsageError(f"{path} is not an inverse-dynamics checkpoint")
        model = cls(InvDynConfig(**meta["config"]))
        model.store.load_state_dict(arrays)
        model.train_steps = int(meta.get("train_steps", 0))
        if "normalizer" in meta:
            model.normalizer = Normalizer.from_meta(meta["normalizer"])
        return model


def predict_action(s, s_next, model):
    return model.predict_action(s, s_next)


def cosine_lr(base, step, total, floor=1e-3):
    """Learning rate at 0-based ``step``: cosine decay from ``base`` to ``base * floor``."""
    return base * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * step / total)))


def train_invdyn(dataset, model, adam=None, steps=5000, seed=0, batch_size=256, clip_norm=None,
                 callback=None, decay=True):
    """MSE regression of a_t on (s_t, s_{t+1}) over the dataset's transitions.

    With ``decay`` the learning rate follows a cosine from ``adam.learning_rate``
    down to a thousandth of it; the fit is precision-limited, not noise-limited.
    """
    if dataset.d_a == 0:
        raise UsageError("dataset has no actions (d_a = 0)")
    adam = adam or nn.AdamConfig(learning_rate=1e-3)
    model.normalizer = dataset.normalizer()
    s, sn, a = transitions(dataset)
    s = model.normalizer.normalize_state(s)
    sn = model.normalizer.normalize_state(sn)
    rng = np.random.default_rng(seed)
    losses = []
    for i in range(steps):
        idx = rng.integers(0, len(a), size=batch_size)
        loss = T.mse(model(s[idx], sn[idx]), a[idx])
        loss.backward()
        if clip_norm is not None:
            model.store.clip_grad_norm(clip_norm)
        model.train_steps += 1
        cfg = replace(adam, learning_rate=cosine_lr(adam.learning_rate, i, steps)) if decay else adam
        nn.adam_step(model.store, cfg, model.train_steps)
        losses.append(loss.item())
        if callback is not None:
            callback(i, losses[-1])
    return losses
