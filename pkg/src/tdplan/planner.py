"""Receding-horizon planning loop: draft with the AR model, refine with diffusion, act with inverse dynamics."""
from __future__ import annotations

import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ar import ARModel
from .diffusion import Denoiser, NFECounter, optimize_trajectory
from .errors import ConfigError, EnvironmentFault, UsageError
from .invdyn import InvDynModel

RTG_MODES = ("decrement", "constant")
COND_SOURCES = ("target", "current")


def update_rtg(rtg, reward, mode="decrement"):
    if mode == "decrement":
        return max(rtg - reward, 0.0)
    if mode == "constant":
        return rtg
    raise ConfigError(f"unknown rtg mode {mode!r}")


@dataclass
class PlanConfig:
    history: int | None = None  # buffer capacity L; None -> AR context
    plan_steps: int | None = None  # C; None -> denoiser horizon - 1
    improve_steps: int = 5
    omega: float = 1.2
    temperature: float = 0.5
    target_rtg: float = 1.0  # raw (unscaled) returns-to-go
    rtg_mode: str = "decrement"
    improve_enabled: bool = True
    rtg_feedback: bool = True
    cond_source: str = "target"

    def __post_init__(self):
        if self.rtg_mode not in RTG_MODES:
            raise ConfigError(f"rtg_mode must be one of {RTG_MODES}")
        if self.cond_source not in COND_SOURCES:
            raise ConfigError(f"cond_source must be one of {COND_SOURCES}")
        if self.history is not None and self.history < 1:
            raise ConfigError("history must be >= 1")
        if self.plan_steps is not None and self.plan_steps < 1:
            raise ConfigError("plan_steps must be >= 1")
        if self.improve_steps < 0 or self.omega < 0 or self.temperature < 0:
            raise ConfigError("improve_steps, omega and temperature must be >= 0")


@dataclass
class PlannerModels:
    ar: ARModel
    denoiser: Denoiser | None = None
    invdyn: InvDynModel | None = None

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        need = [d / "ar.ckpt"]
        missing = [str(p) for p in need if not p.exists()]
        if missing:
            raise UsageError(f"missing checkpoint(s): {', '.join(missing)}")
        den = Denoiser.load(d / "diffusion.ckpt") if (d / "diffusion.ckpt").exists() else None
        inv = InvDynModel.load(d / "invdyn.ckpt") if (d / "invdyn.ckpt").exists() else None
        return cls(ARModel.load(d / "ar.ckpt"), den, inv)


class Planner:
    """One instance per episode; the models are shared read-only."""

    def __init__(self, models: PlannerModels, cfg: PlanConfig, seed=0):
        ar, den = models.ar, models.denoiser
        if not ar.trained:
            raise UsageError("autoregressive model is untrained")
        if cfg.improve_enabled:
            if den is None or not den.trained:
                raise UsageError("diffusion optimisation needs a trained denoiser")
            self.sched = den.schedule()
            if cfg.improve_steps > self.sched.K:
                raise ConfigError(f"improve_steps {cfg.improve_steps} exceeds K={self.sched.K}")
        if models.invdyn is not None and not models.invdyn.trained:
            raise UsageError("inverse-dynamics model is untrained")
        self.models = models
        self.cfg = cfg
        self.history = ar.config.context if cfg.history is None else cfg.history
        if cfg.plan_steps is not None:
            self.plan_steps = cfg.plan_steps
        elif den is not None:
            self.plan_steps = den.config.horizon - 1
        else:
            raise ConfigError("plan_steps must be set when no denoiser is loaded")
        if cfg.improve_enabled and (self.plan_steps + 1) % den.config.length_multiple:
            raise ConfigError(f"plan length {self.plan_steps + 1} must be a multiple of "
                              f"{den.config.length_multiple}")
        self.seed = seed
        self.reset()

    def reset(self, seed=None):
        if seed is not None:
            self.seed = seed
        self.rng = np.random.default_rng(self.seed)
        self.states = deque(maxlen=self.history)
        self.rtgs = deque(maxlen=self.history)
        self.rtg = float(self.cfg.target_rtg)
        self.counter = NFECounter()
        self.ar_forwards = 0
        self.actions = 0
        self.last_draft = None
        self.last_plan = None

    def observe_reward(self, reward):
        self.rtg = update_rtg(self.rtg, reward, self.cfg.rtg_mode)

    def plan(self, obs):
        """Insert ``obs`` and return the (C+1, d_s) raw-state plan starting at ``obs``."""
        ar = self.models.ar
        norm = ar.normalizer
        obs = np.asarray(obs, dtype=np.float64)
        self.states.append(norm.normalize_state(obs))
        self.rtgs.append(float(norm.scale_rtg(self.rtg)))
        window = min(self.history, ar.config.context)
        planned, _ = ar.rollout(np.stack(self.states), np.array(self.rtgs), self.plan_steps,
                                window=window, rtg_feedback=self.cfg.rtg_feedback)
        self.ar_forwards += self.plan_steps
        draft = norm.denormalize_state(np.vstack([self.states[-1], planned]))
        draft[0] = obs
        self.last_draft = draft
        plan = draft
        if self.cfg.improve_enabled:
            den = self.models.denoiser
            dn = den.normalizer
            raw_cond = self.cfg.target_rtg if self.cfg.cond_source == "target" else self.rtg
            tau = dn.normalize_state(draft)
            opt = optimize_trajectory(tau, float(dn.scale_rtg(raw_cond)), self.cfg.improve_steps,
                                      self.cfg.omega, self.cfg.temperature, self.rng, den,
                                      self.sched, self.counter)
            plan = dn.denormalize_state(opt)
            plan[0] = obs
        self.last_plan = plan
        return plan

    def plan_step(self, obs):
        """One control step: returns (action, planned states (C, d_s)).

        Action-free setups (no inverse-dynamics model) get ``None`` as the action.
        """
        plan = self.plan(obs)
        self.actions += 1
        inv = self.models.invdyn
        if inv is None:
            return None, plan[1:]
        inorm = inv.normalizer
        action = inv.predict_action(inorm.normalize_state(plan[0]), inorm.normalize_state(plan[1]))
        return action, plan[1:]

    @property
    def nfe_per_action(self):
        return self.counter.denoiser / self.actions if self.actions else 0.0


@dataclass
class EpisodeResult:
    ret: float
    steps: int
    success: bool
    latencies: list = field(default_factory=list)
    nfe_total: int = 0
    ar_forwards: int = 0
    seed: int = 0

    @property
    def nfe_per_action(self):
        return self.nfe_total / self.steps if self.steps else 0.0

    def to_record(self, timings=True):
        rec = {"seed": self.seed, "return": self.ret, "length": self.steps, "success": self.success,
               "nfe_total": self.nfe_total, "nfe_per_action": self.nfe_per_action,
               "ar_forwards": self.ar_forwards}
        if timings:
            lat = np.asarray(self.latencies) if self.latencies else np.zeros(1)
            rec.update(latency_mean=float(lat.mean()), latency_p50=float(np.percentile(lat, 50)),
                       latency_p95=float(np.percentile(lat, 95)))
        return rec


def run_episode(env, models, cfg, seed, max_steps=None, policy=None):
    """Roll out one episode; ``policy(obs)`` overrides the planner (used for reference policies)."""
    max_steps = env.max_steps if max_steps is None else max_steps
    planner = None if policy is not None else Planner(models, cfg, seed)
    env_rng = np.random.default_rng([seed, 1])
    s = env.reset(env_rng)
    total, steps, done, lat = 0.0, 0, False, []
    while steps < max_steps and not done:
        t0 = time.perf_counter()
        a = policy(s) if policy is not None else planner.plan_step(s)[0]
        lat.append(time.perf_counter() - t0)
        try:
            s, r, done = env.step(s, a)
        except Exception as exc:
            raise EnvironmentFault(f"environment {env.name!r} failed at step {steps}: {exc}") from exc
        total += r
        steps += 1
        if planner is not None:
            planner.observe_reward(r)
    return EpisodeResult(
        ret=total, steps=steps, success=bool(done), latencies=lat,
        nfe_total=planner.counter.denoiser if planner else 0,
        ar_forwards=planner.ar_forwards if planner else 0, seed=int(seed),
    )
