"""Autoregressive state / returns-to-go model that drafts feasible trajectories.

Each timestep is one token built from the state and its returns-to-go, so a
window of K timesteps is K tokens. The transformer's output at position t is
read by two linear heads as the prediction of (s_{t+1}, R_{t+1}).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .data import Normalizer, sample_batch
from .errors import ConfigError, DimensionError, UsageError
from .nn import layers as L
from .nn import tensor as T


@dataclass
class ARConfig:
    state_dim: int
    n_layers: int = 2
    n_heads: int = 2
    embed_dim: int = 64
    context: int = 32
    dropout: float = 0.0
    mlp_ratio: int = 4
    activation: str = "relu"
    backbone: str = "transformer"

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.context < 1 or self.state_dim < 1:
            raise ConfigError("context and state_dim must be >= 1")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; available: {sorted(BACKBONES)}")


# backbones ----------------------------------------------------------------
# A backbone maps token embeddings (B, T, E) to hidden states (B, T, E) and
# must be causal. Only the transformer ships; others register here.

def _transformer_init(store, cfg, rng):
    E = cfg.embed_dim
    for i in range(cfg.n_layers):
        p = f"blocks.{i}"
        L.init_norm(store, f"{p}.ln1", E)
        L.init_attention(store, f"{p}.attn", E, rng)
        L.init_norm(store, f"{p}.ln2", E)
        L.init_linear(store, f"{p}.mlp.fc", E, cfg.mlp_ratio * E, rng)
        L.init_linear(store, f"{p}.mlp.proj", cfg.mlp_ratio * E, E, rng)
    L.init_norm(store, "ln_f", E)


def _transformer_apply(h, store, cfg, key_mask, rng=None):
    act = L.activation(cfg.activation)
    drop = cfg.dropout if rng is not None else 0.0
    for i in range(cfg.n_layers):
        p = f"blocks.{i}"
        a = L.causal_self_attention(L.layer_norm(h, store, f"{p}.ln1"), store, f"{p}.attn",
                                    cfg.n_heads, key_mask)
        h = h + T.dropout(a, drop, rng)
        m = L.linear(act(L.linear(L.layer_norm(h, store, f"{p}.ln2"), store, f"{p}.mlp.fc")),
                     store, f"{p}.mlp.proj")
        h = h + T.dropout(m, drop, rng)
    return L.layer_norm(h, store, "ln_f")


BACKBONES = {"transformer": (_transformer_init, _transformer_apply)}


class ARModel:
    def __init__(self, config: ARConfig, seed=0):
        self.config = config
        self.store = nn.ParamStore()
        self.normalizer = None
        self.train_steps = 0
        rng = np.random.default_rng(seed)
        E, d = config.embed_dim, config.state_dim
        L.init_linear(self.store, "embed.state", d, E, rng)
        L.init_linear(self.store, "embed.rtg", 1, E, rng)
        L.init_norm(self.store, "embed.ln", E)
        self.store.add("embed.pos", 0.02 * rng.standard_normal((config.context, E)))
        BACKBONES[config.backbone][0](self.store, config, rng)
        L.init_linear(self.store, "head.state", E, d, rng)
        L.init_linear(self.store, "head.rtg", E, 1, rng)

    @property
    def trained(self):
        return self.train_steps > 0

    # embedding ------------------------------------------------------------
    def embed_pre_norm(self, states, rtgs):
        states = T.as_tensor(states)
        rtgs = np.asarray(rtgs, dtype=np.float64)[..., None]
        if states.shape[-1] != self.config.state_dim:
            raise DimensionError(f"state dim {states.shape[-1]} != {self.config.state_dim}")
        return L.linear(states, self.store, "embed.state") + L.linear(rtgs, self.store, "embed.rtg")

    def embed(self, states, rtgs):
        """Token embeddings (before the positional term) for (…, T, d_s) states and (…, T) rtgs."""
        return L.layer_norm(self.embed_pre_norm(states, rtgs), self.store, "embed.ln")

    def embed_token(self, s, rtg):
        return self.embed(np.asarray(s, dtype=np.float64)[None], np.array([rtg], dtype=np.float64)).data[0]

    # forward -------------------------------------------------------------------
    def forward(self, states, rtgs, key_mask=None, rng=None):
        """Predict next (state, rtg) for every position of a right-aligned window.

        states (B, n, d_s) and rtgs (B, n) are normalised; the last token sits
        at positional slot ``context - 1``.
        """
        states = np.asarray(states, dtype=np.float64)
        rtgs = np.asarray(rtgs, dtype=np.float64)
        squeeze = states.ndim == 2
        if squeeze:
            states, rtgs = states[None], rtgs[None]
            if key_mask is not None:
                key_mask = np.asarray(key_mask)[None]
        n = states.shape[1]
        K = self.config.context
        if n > K:
            raise UsageError(f"sequence length {n} exceeds context window {K}")
        if n < 1:
            raise UsageError("forward needs at least one token")
        h = self.embed(states, rtgs) + self.store["embed.pos"][K - n:]
        h = BACKBONES[self.config.backbone][1](h, self.store, self.config, key_mask, rng)
        ps = L.linear(h, self.store, "head.state")
        pr = L.linear(h, self.store, "head.rtg")
        pr = pr.reshape(pr.shape[:-1])
        if squeeze:
            ps, pr = ps[0], pr[0]
        return ps, pr

    def loss(self, batch, rng=None):
        ps, pr = self.forward(batch.states, batch.rtgs, key_mask=batch.mask > 0, rng=rng)
        m = batch.mask
        if m.sum() == 0:
            raise UsageError("batch has no unmasked positions")
        ds = ps - batch.target_states
        dr = pr - batch.target_rtgs
        per_pos = T.sum_(T.square(ds), axis=-1) + T.square(dr)
        return T.sum_(per_pos * m) * (1.0 / float(m.sum()))

    def train_step(self, batch, adam: nn.AdamConfig, clip_norm=1.0, rng=None):
        loss = self.loss(batch, rng=rng if self.config.dropout > 0 else None)
        loss.backward()
        self.store.clip_grad_norm(clip_norm)
        self.train_steps += 1
        nn.adam_step(self.store, adam, self.train_steps)
        return loss.item()

    # generation --------------------------------------------------------------
    def predict_next(self, states, rtgs):
        with nn.no_grad():
            ps, pr = self.forward(states, rtgs)
        return ps.data[-1], float(pr.data[-1])

    def rollout(self, history_states, history_rtgs, C, window=None, rtg_feedback=True):
        """Greedy C-step continuation of a (normalised) history.

        Each step feeds the most recent ``window`` tokens (default: the full
        context) and appends the predicted state and returns-to-go. With
        ``rtg_feedback=False`` the last supplied returns-to-go is repeated
        instead of the prediction.
        """
        hs = [np.asarray(s, dtype=np.float64) for s in np.atleast_2d(history_states)]
        hr = [float(r) for r in np.atleast_1d(history_rtgs)]
        if len(hs) != len(hr):
            raise DimensionError("history states and rtgs differ in length")
        win = self.config.context if window is None else window
        if not hs or not 1 <= win <= self.config.context:
            raise UsageError("history must be non-empty and window within the context")
        if C < 0:
            raise UsageError("planning steps must be >= 0")
        out_s, out_r = [], []
        for _ in range(C):
            s_next, r_next = self.predict_next(np.stack(hs[-win:]), np.array(hr[-win:]))
            if not rtg_feedback:
                r_next = hr[-1]
            hs.append(s_next)
            hr.append(r_next)
            out_s.append(s_next)
            out_r.append(r_next)
        d = self.config.state_dim
        return (np.array(out_s).reshape(C, d), np.array(out_r))

    # persistence -----------------------------------------------------------------
    def meta(self):
        meta = {"kind": "ar", "config": asdict(self.config), "train_steps": self.train_steps}
        if self.normalizer is not None:
            meta["normalizer"] = self.normalizer.to_meta()
        return meta

    def save(self, path):
        nn.save_checkpoint(path, self.store, self.meta())

    @classmethod
    def load(cls, path):
        arrays, meta = nn.load_checkpoint(path)
        if meta.get("kind") != "ar":
            raise UsageError(f"{path} is not an autoregressive-model checkpoint")
        model = cls(ARConfig(**meta["config"]))
        model.store.load_state_dict(arrays)
        model.train_steps = int(meta.get("train_steps", 0))
        if "normalizer" in meta:
            model.normalizer = Normalizer.from_meta(meta["normalizer"])
        return model


def train_ar(model, dataset, steps, batch_size=32, adam=None, seed=0, clip_norm=1.0, callback=None):
    """Train on uniformly sampled context windows; returns the per-step loss list."""
    adam = adam or nn.AdamConfig(learning_rate=2e-4)
    model.normalizer = dataset.normalizer()
    rng = np.random.default_rng(seed)
    losses = []
    for i in range(steps):
        batch = sample_batch(dataset, model.config.context, batch_size, rng, model.normalizer)
        losses.append(model.train_step(batch, adam, clip_norm, rng))
        if callback is not None:
            callback(i, losses[-1])
    return losses
