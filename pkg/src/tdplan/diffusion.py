"""Conditional state-sequence diffusion used as a short-horizon trajectory optimiser.

Noise schedules, the temporal U-Net noise model with a learned null
condition, the dropout-conditioned training loss, classifier-free guidance
and the partial reverse chain that refines a drafted trajectory.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .data import Normalizer, sample_state_windows
from .errors import ConfigError, DimensionError, UsageError
from .nn import layers as L
from .nn import tensor as T


# noise schedule -----------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step tables; index k-1 holds step k for k = 1..K."""
    K: int
    kind: str
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def beta(self, k):
        return float(self.betas[k - 1])

    def alpha(self, k):
        return float(self.alphas[k - 1])

    def alpha_bar(self, k):
        return float(self.alpha_bars[k - 1])


def _cosine_alpha_bar(t, s=0.008):
    return math.cos((t + s) / (1 + s) * math.pi / 2) ** 2


def build_schedule(K, kind="cosine", beta_start=1e-4, beta_end=2e-2):
    if K < 1:
        raise ConfigError("number of diffusion steps must be >= 1")
    if kind == "linear":
        betas = np.array([beta_start]) if K == 1 else np.linspace(beta_start, beta_end, K)
    elif kind == "cosine":
        f = np.array([_cosine_alpha_bar(i / K) for i in range(K + 1)])
        betas = np.clip(1.0 - f[1:] / f[:-1], 1e-8, 0.999)
    else:
        raise ConfigError(f"unknown noise schedule {kind!r}")
    alphas = 1.0 - betas
    return NoiseSchedule(K, kind, betas, alphas, np.cumprod(alphas))


def _check_k(k, sched):
    if not 1 <= k <= sched.K:
        raise UsageError(f"diffusion step {k} outside 1..{sched.K}")


def forward_noise(x0, k, eps, sched):
    """Closed-form q(x_k | x_0): sqrt(abar_k) x0 + sqrt(1 - abar_k) eps."""
    _check_k(k, sched)
    ab = sched.alpha_bar(k)
    return math.sqrt(ab) * np.asarray(x0) + math.sqrt(1.0 - ab) * np.asarray(eps)


def forward_noise_batch(x0, ks, eps, sched):
    ab = sched.alpha_bars[np.asarray(ks) - 1][:, None, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def reverse_step(x_k, eps_hat, k, sched, temperature=0.5, rng=None):
    """One ancestral step with mean from the noise estimate and variance temperature * beta_k.

    At k = 1 the mean is returned without noise.
    """
    if k < 1:
        raise UsageError("reverse_step needs k >= 1")
    _check_k(k, sched)
    a, b, ab = sched.alpha(k), sched.beta(k), sched.alpha_bar(k)
    mu = (np.asarray(x_k) - (b / math.sqrt(1.0 - ab)) * np.asarray(eps_hat)) / math.sqrt(a)
    if k == 1 or temperature <= 0.0:
        return mu
    if rng is None:
        raise UsageError("stochastic reverse step needs an rng")
    return mu + math.sqrt(temperature * b) * rng.standard_normal(mu.shape)


# noise model -------------------------------------------------------------------------

@dataclass
class DenoiserConfig:
    state_dim: int
    horizon: int = 16
    channels: tuple = (32, 64)
    kernel: int = 5
    embed_dim: int = 64
    mlp_hidden: int = 128
    groups: int = 8

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if not self.channels:
            raise ConfigError("denoiser needs at least one channel level")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"temporal kernel must be odd, got {self.kernel}")
        if self.horizon % self.length_multiple:
            raise ConfigError(f"horizon {self.horizon} must be a multiple of {self.length_multiple}")

    @property
    def length_multiple(self):
        return 2 ** (len(self.channels) - 1)


class Denoiser:
    """Temporal U-Net predicting the injected noise from (x_k, condition, k).

    Step and condition embeddings come from separate two-layer Mish MLPs; the
    null condition is its own learned vector. Their concatenation is projected
    into every residual block after its first convolution.
    """

    def __init__(self, config: DenoiserConfig, seed=0):
        self.config = config
        self.store = nn.ParamStore()
        self.normalizer = None
        self.train_steps = 0
        self.schedule_meta = None
        rng = np.random.default_rng(seed)
        c = config
        E, Hd = c.embed_dim, c.mlp_hidden
        L.init_linear(self.store, "time.fc1", E, Hd, rng)
        L.init_linear(self.store, "time.fc2", Hd, E, rng)
        L.init_linear(self.store, "cond.fc1", 1, Hd, rng)
        L.init_linear(self.store, "cond.fc2", Hd, E, rng)
        self.store.add("cond.null", rng.standard_normal(E) / math.sqrt(E))
        self._blocks = []
        cin = c.state_dim
        for i, ch in enumerate(c.channels):
            self._init_block(f"down{i}.0", cin, ch, rng)
            self._init_block(f"down{i}.1", ch, ch, rng)
            cin = ch
        self._init_block("mid", cin, cin, rng)
        for i in reversed(range(len(c.channels) - 1)):
            self._init_block(f"up{i}.0", c.channels[i + 1] + c.channels[i], c.channels[i], rng)
            self._init_block(f"up{i}.1", c.channels[i], c.channels[i], rng)
        c0 = c.channels[0]
        L.init_conv1d(self.store, "final.conv", c0, c0, c.kernel, rng)
        L.init_norm(self.store, "final.gn", c0)
        L.init_conv1d(self.store, "final.out", c0, c.state_dim, 1, rng)

    @property
    def trained(self):
        return self.train_steps > 0

    def _init_block(self, name, cin, cout, rng):
        k = self.config.kernel
        L.init_conv1d(self.store, f"{name}.conv1", cin, cout, k, rng)
        L.init_norm(self.store, f"{name}.gn1", cout)
        L.init_linear(self.store, f"{name}.emb", 2 * self.config.embed_dim, cout, rng)
        L.init_conv1d(self.store, f"{name}.conv2", cout, cout, k, rng)
        L.init_norm(self.store, f"{name}.gn2", cout)
        if cin != cout:
            L.init_conv1d(self.store, f"{name}.skip", cin, cout, 1, rng)

    def _block(self, name, h, emb):
        g = self.config.groups
        s = self.store
        out = T.mish(L.group_norm(L.conv1d_temporal(h, s, f"{name}.conv1"), s, f"{name}.gn1", g))
        out = out + L.linear(emb, s, f"{name}.emb").reshape(emb.shape[0], 1, -1)
        out = T.mish(L.group_norm(L.conv1d_temporal(out, s, f"{name}.conv2"), s, f"{name}.gn2", g))
        res = L.conv1d_temporal(h, s, f"{name}.skip") if f"{name}.skip.weight" in s else h
        return out + res

    def embed(self, cond, null, ks):
        s = self.store
        te = L.sinusoidal_embedding(ks, self.config.embed_dim)
        te = L.linear(T.mish(L.linear(te, s, "time.fc1")), s, "time.fc2")
        ce = L.linear(T.mish(L.linear(np.asarray(cond, dtype=np.float64)[:, None], s, "cond.fc1")),
                      s, "cond.fc2")
        m = np.asarray(null, dtype=np.float64)[:, None]
        ce = ce * (1.0 - m) + s["cond.null"] * m
        return T.mish(T.concat([te, ce], axis=-1))

    def __call__(self, x, cond, null, ks):
        """Noise estimate for a batch.

        x (B, H, d_s); cond (B,) scaled returns-to-go; null (B,) bool selects
        the null condition; ks (B,) integer diffusion steps.
        """
        x = T.as_tensor(x)
        B, H, d = x.shape
        if d != self.config.state_dim:
            raise DimensionError(f"state dim {d} != {self.config.state_dim}")
        if H % self.config.length_multiple:
            raise DimensionError(f"sequence length {H} must be a multiple of {self.config.length_multiple}")
        emb = self.embed(cond, null, ks)
        chans = self.config.channels
        h = x
        skips = []
        for i in range(len(chans)):
            h = self._block(f"down{i}.0", h, emb)
            h = self._block(f"down{i}.1", h, emb)
            if i < len(chans) - 1:
                skips.append(h)
                b_, t_, c_ = h.shape
                h = h.reshape(b_, t_ // 2, 2, c_).mean(axis=2)
        h = self._block("mid", h, emb)
        for i in reversed(range(len(chans) - 1)):
            b_, t_, c_ = h.shape
            h = (h.reshape(b_, t_, 1, c_) + np.zeros((1, 1, 2, 1))).reshape(b_, 2 * t_, c_)
            h = T.concat([h, skips[i]], axis=-1)
            h = self._block(f"up{i}.0", h, emb)
            h = self._block(f"up{i}.1", h, emb)
        s = self.store
        h = T.mish(L.group_norm(L.conv1d_temporal(h, s, "final.conv"), s, "final.gn", self.config.groups))
        return L.conv1d_temporal(h, s, "final.out")

    def predict(self, x, cond, null, ks):
        with nn.no_grad():
            return self(x, cond, null, ks).data

    # persistence -------------------------------------------------------------
    def meta(self):
        cfg = asdict(self.config)
        cfg["channels"] = list(cfg["channels"])
        meta = {"kind": "denoiser", "config": cfg, "train_steps": self.train_steps,
                "schedule": self.schedule_meta}
        if self.normalizer is not None:
            meta["normalizer"] = self.normalizer.to_meta()
        return meta

    def save(self, path):
        nn.save_checkpoint(path, self.store, self.meta())

    @classmethod
    def load(cls, path):
        arrays, meta = nn.load_checkpoint(path)
        if meta.get("kind") != "denoiser":
            raise UsageError(f"{path} is not a denoiser checkpoint")
        model = cls(DenoiserConfig(**meta["config"]))
        model.store.load_state_dict(arrays)
        model.train_steps = int(meta.get("train_steps", 0))
        model.schedule_meta = meta.get("schedule")
        if "normalizer" in meta:
            model.normalizer = Normalizer.from_meta(meta["normalizer"])
        return model

    def schedule(self):
        if not self.schedule_meta:
            raise UsageError("denoiser carries no noise schedule")
        return build_schedule(self.schedule_meta["K"], self.schedule_meta["kind"])


# training -----------------------------------------------------------------------------

@dataclass(frozen=True)
class GuidanceParams:
    omega: float = 1.2
    improve_steps: int = 5
    p_dropout: float = 0.5

    def validate(self, sched):
        if self.omega < 0:
            raise ConfigError("guidance scale must be >= 0")
        if not 0 <= self.improve_steps <= sched.K:
            raise ConfigError(f"improve_steps {self.improve_steps} outside 0..{sched.K}")
        if not 0.0 <= self.p_dropout <= 1.0:
            raise ConfigError("condition dropout probability must lie in [0, 1]")


def denoising_loss(eps_model, x0, y, ks, eps, eta, sched):
    """Mean squared error between injected and predicted noise.

    ``eta`` (B,) bool replaces the condition with the null token.
    ``eps_model(x_k, y, null, ks)`` may return a Tensor or an array.
    """
    xk = forward_noise_batch(x0, ks, eps, sched)
    pred = eps_model(xk, y, eta, ks)
    return T.mse(T.as_tensor(pred), eps)


def sample_training_tuple(dataset, horizon, batch_size, sched, p, rng, normalizer=None, pad_tail=True):
    """Draw (x0, y, k, eps, eta) for one dropout-conditioned training batch."""
    if dataset is None or len(dataset) == 0:
        raise UsageError("cannot train on an empty dataset")
    if not 0.0 <= p <= 1.0:
        raise UsageError("condition dropout probability must lie in [0, 1]")
    x0, y = sample_state_windows(dataset, horizon, batch_size, rng, normalizer, pad_tail)
    ks = rng.integers(1, sched.K + 1, size=batch_size)
    eps = rng.standard_normal(x0.shape)
    eta = rng.random(batch_size) < p
    return x0, y, ks, eps, eta


def train_step(dataset, model, sched, p, rng, adam, batch_size=32, clip_norm=1.0, pad_tail=True):
    x0, y, ks, eps, eta = sample_training_tuple(dataset, model.config.horizon, batch_size,
                                                sched, p, rng, model.normalizer, pad_tail)
    loss = denoising_loss(model, x0, y, ks, eps, eta, sched)
    loss.backward()
    model.store.clip_grad_norm(clip_norm)
    model.train_steps += 1
    nn.adam_step(model.store, adam, model.train_steps)
    return loss.item()


def train_denoiser(model, dataset, sched, steps, p=0.5, batch_size=32, adam=None, seed=0,
                   clip_norm=1.0, callback=None, pad_tail=True):
    adam = adam or nn.AdamConfig(learning_rate=2e-4)
    model.normalizer = dataset.normalizer()
    model.schedule_meta = {"K": sched.K, "kind": sched.kind}
    rng = np.random.default_rng(seed)
    losses = []
    for i in range(steps):
        losses.append(train_step(dataset, model, sched, p, rng, adam, batch_size, clip_norm, pad_tail))
        if callback is not None:
            callback(i, losses[-1])
    return losses


# guidance and optimisation ---------------------------------------------------------------

def combine_guidance(eps_uncond, eps_cond, omega):
    """eps_u + omega * (eps_c - eps_u); exact at omega 0 and 1."""
    if omega == 0.0:
        return eps_uncond
    if omega == 1.0:
        return eps_cond
    return eps_uncond + omega * (eps_cond - eps_uncond)


def combine_guidance_interpolated(eps_uncond, eps_cond, omega):
    """The same combination written as (1 - omega) * eps_u + omega * eps_c."""
    return (1.0 - omega) * eps_uncond + omega * eps_cond


@dataclass
class NFECounter:
    denoiser: int = 0
    forwards: int = 0
    extra: dict = field(default_factory=dict)


def guided_eps(model, x_k, y, k, omega, counter=None):
    """Guided noise estimate for one (H, d_s) trajectory.

    Conditional and unconditional branches run as one batch of two; both
    count towards the denoiser evaluation total.
    """
    x_k = np.asarray(x_k, dtype=np.float64)
    xb = np.stack([x_k, x_k])
    out = model.predict(xb, np.array([y, 0.0]), np.array([False, True]), np.array([k, k]))
    if counter is not None:
        counter.denoiser += 2
        counter.forwards += 1
    return combine_guidance(out[1], out[0], omega)


def optimize_trajectory(tau, y, improve_steps, omega, temperature, rng, model, sched, counter=None):
    """Noise ``tau`` to step ``improve_steps`` and run the guided reverse chain back to 0.

    Row 0 is pinned to ``tau[0]`` before every denoising step and after the
    last one. ``improve_steps = 0`` returns a copy of ``tau``.
    """
    tau = np.asarray(tau, dtype=np.float64)
    if not 0 <= improve_steps <= sched.K:
        raise UsageError(f"improve_steps {improve_steps} outside 0..{sched.K}")
    if improve_steps == 0:
        return tau.copy()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    x = forward_noise(tau, improve_steps, rng.standard_normal(tau.shape), sched)
    for k in range(improve_steps, 0, -1):
        x[0] = tau[0]
        eps_hat = guided_eps(model, x, y, k, omega, counter)
        x = reverse_step(x, eps_hat, k, sched, temperature, rng)
    x[0] = tau[0]
    return x


def full_denoise(first_state, horizon, y, omega, temperature, rng, model, sched, counter=None):
    """Baseline planner: start from pure noise and run all K guided steps."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    d = model.config.state_dim
    x = rng.standard_normal((horizon, d))
    first = np.asarray(first_state, dtype=np.float64)
    for k in range(sched.K, 0, -1):
        x[0] = first
        eps_hat = guided_eps(model, x, y, k, omega, counter)
        x = reverse_step(x, eps_hat, k, sched, temperature, rng)
    x[0] = first
    return x
