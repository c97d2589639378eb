"""Deterministic toy environments, scripted behaviour policies and dataset generation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .data import OfflineDataset, Trajectory, compute_returns_to_go
from .errors import ConfigError, UsageError

TIERS = ("random", "medium", "expert", "mixed")
# probability that the scripted controller's action is replaced by a uniform one
TIER_NOISE = {"medium": 0.30, "expert": 0.05}


@dataclass(frozen=True)
class EnvSpec:
    name: str
    d_s: int
    d_a: int
    max_steps: int
    reward_kind: str

    def __post_init__(self):
        if self.d_s < 1:
            raise ConfigError("environments need d_s >= 1")
        if self.reward_kind not in ("sparse", "dense", "none"):
            raise ConfigError(f"unknown reward kind {self.reward_kind!r}")


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


class PointMaze2D:
    """Continuous 2-D maze with axis-aligned walls and a sparse goal reward.

    A step moves x first and then y; each leg stops ``contact_margin`` short of
    the first wall it would cross, so trajectories never pass through a wall.
    The default layout has one wall at x = 2.5 rising from the floor to
    y = 3.5, with the start region to its left and the goal to its right.
    """

    name = "maze"

    def __init__(self, size=(5.0, 5.0), walls=(((2.5, 0.0), (2.5, 3.5)),),
                 start_low=(0.5, 0.5), start_high=(1.5, 1.5), goal=(4.0, 1.0),
                 goal_radius=0.4, a_max=0.25, max_steps=32, waypoint=(2.5, 4.25),
                 contact_margin=1e-6):
        self.size = np.array(size, dtype=np.float64)
        self.walls = tuple(tuple(tuple(float(v) for v in p) for p in w) for w in walls)
        self.start_low = np.array(start_low, dtype=np.float64)
        self.start_high = np.array(start_high, dtype=np.float64)
        self.goal = np.array(goal, dtype=np.float64)
        self.goal_radius = float(goal_radius)
        self.a_max = float(a_max)
        self.max_steps = int(max_steps)
        self.waypoint = np.array(waypoint, dtype=np.float64)
        self.margin = float(contact_margin)
        self.spec = EnvSpec(self.name, 2, 2, self.max_steps, "sparse")
        vx, vlo, vhi, hy, hlo, hhi = [], [], [], [], [], []
        for (x0, y0), (x1, y1) in self.walls:
            if x0 == x1:
                vx.append(x0), vlo.append(min(y0, y1)), vhi.append(max(y0, y1))
            elif y0 == y1:
                hy.append(y0), hlo.append(min(x0, x1)), hhi.append(max(x0, x1))
            else:
                raise ConfigError("maze walls must be axis-aligned")
        self._v = tuple(np.array(a, dtype=np.float64) for a in (vx, vlo, vhi))
        self._h = tuple(np.array(a, dtype=np.float64) for a in (hy, hlo, hhi))

    def params(self):
        return {"name": self.name, "size": self.size.tolist(), "walls": [list(map(list, w)) for w in self.walls],
                "start_low": self.start_low.tolist(), "start_high": self.start_high.tolist(),
                "goal": self.goal.tolist(), "goal_radius": self.goal_radius, "a_max": self.a_max,
                "max_steps": self.max_steps, "waypoint": self.waypoint.tolist(),
                "contact_margin": self.margin}

    def reset(self, seed=None):
        return _rng(seed).uniform(self.start_low, self.start_high)

    def in_goal(self, state):
        return float(np.linalg.norm(np.asarray(state) - self.goal)) <= self.goal_radius

    def step(self, state, action):
        a = np.clip(np.asarray(action, dtype=np.float64), -self.a_max, self.a_max)
        x, y = float(state[0]), float(state[1])
        x = kernels.move_axis(x, float(a[0]), 0.0, float(self.size[0]), *self._v, y, self.margin)
        y = kernels.move_axis(y, float(a[1]), 0.0, float(self.size[1]), *self._h, x, self.margin)
        nxt = np.array([x, y])
        r = 1.0 if self.in_goal(nxt) else 0.0
        return nxt, r, r > 0.0

    def controller(self, state):
        """Greedy waypoint-following action: over the wall first, then to the goal."""
        s = np.asarray(state)
        wall_x = self.waypoint[0]
        target = self.goal if (s[0] > wall_x or s[1] >= self.waypoint[1] - 0.25) else self.waypoint
        return np.clip(target - s, -self.a_max, self.a_max)

    def random_action(self, rng):
        return rng.uniform(-self.a_max, self.a_max, size=2)


class LinearSystem:
    """s' = A s + B a with a dense quadratic goal reward."""

    name = "linear"

    def __init__(self, A=((0.9, 0.1), (-0.1, 0.9)), B=((0.5, 0.1), (0.0, 0.5)), goal=(1.0, -1.0),
                 init_scale=1.0, a_max=1.0, max_steps=50, gain=0.5, name=None):
        self.A = np.array(A, dtype=np.float64)
        self.B = np.array(B, dtype=np.float64)
        if self.A.shape[0] != self.A.shape[1] or self.B.shape[0] != self.A.shape[0]:
            raise ConfigError("A must be square and B must have as many rows as A")
        if np.linalg.matrix_rank(self.B) != self.B.shape[1]:
            raise ConfigError("B must have full column rank")
        self.B_pinv = np.linalg.pinv(self.B)
        self.goal = np.array(goal, dtype=np.float64)
        self.init_scale = float(init_scale)
        self.a_max = float(a_max)
        self.max_steps = int(max_steps)
        self.gain = float(gain)
        if name is not None:
            self.name = name
        self.spec = EnvSpec(self.name, self.A.shape[0], self.B.shape[1], self.max_steps, "dense")

    def params(self):
        return {"name": self.name, "A": self.A.tolist(), "B": self.B.tolist(), "goal": self.goal.tolist(),
                "init_scale": self.init_scale, "a_max": self.a_max, "max_steps": self.max_steps,
                "gain": self.gain}

    def reset(self, seed=None):
        return _rng(seed).uniform(-self.init_scale, self.init_scale, size=self.A.shape[0])

    def step(self, state, action):
        a = np.clip(np.asarray(action, dtype=np.float64), -self.a_max, self.a_max)
        nxt = self.A @ np.asarray(state, dtype=np.float64) + self.B @ a
        d = nxt - self.goal
        return nxt, -float(d @ d), False

    def inverse_action(self, s, s_next):
        """Closed-form a = B^+ (s' - A s), batched over leading axes."""
        s = np.asarray(s, dtype=np.float64)
        s_next = np.asarray(s_next, dtype=np.float64)
        return (s_next - s @ self.A.T) @ self.B_pinv.T

    def controller(self, state):
        return np.clip(self.gain * self.inverse_action(state, self.goal), -self.a_max, self.a_max)

    def random_action(self, rng):
        return rng.uniform(-self.a_max, self.a_max, size=self.B.shape[1])


def integrator(dim=2, **kwargs):
    """The single integrator s' = s + a."""
    eye = np.eye(dim)
    kwargs.setdefault("goal", np.zeros(dim))
    return LinearSystem(A=eye, B=eye, name="integrator", **kwargs)


class Freq1DTask:
    """Action-free 1-D signals: a dominant sinusoid plus weak interfering tones.

    Frequencies are given in cycles per ``window`` samples so that every
    length-``window`` slice holds whole periods. Each step's reward is minus
    the signal's interference power, constant within a signal.
    """

    name = "freq1d"

    def __init__(self, length=64, window=32, base_cycles=2, interference_cycles=(5, 7, 11),
                 max_interference=0.2, noise_std=0.01, gamma=0.9):
        if window < 8 or length < window:
            raise ConfigError("freq1d needs window >= 8 and length >= window")
        if max_interference > 0.2:
            raise ConfigError("interference amplitudes are capped at 0.2")
        self.length = int(length)
        self.window = int(window)
        self.base_cycles = int(base_cycles)
        self.interference_cycles = tuple(int(c) for c in interference_cycles)
        self.max_interference = float(max_interference)
        self.noise_std = float(noise_std)
        self.gamma = float(gamma)
        self.max_steps = self.length
        self.spec = EnvSpec(self.name, 1, 0, self.length, "dense")
        self._signal = None
        self._t = 0

    def params(self):
        return {"name": self.name, "length": self.length, "window": self.window,
                "base_cycles": self.base_cycles, "interference_cycles": list(self.interference_cycles),
                "max_interference": self.max_interference, "noise_std": self.noise_std,
                "gamma": self.gamma}

    def sample_signal(self, rng, interference=None):
        """Return (signal, clean part, interference power)."""
        t = np.arange(self.length)
        w = 2 * np.pi / self.window
        clean = np.sin(w * self.base_cycles * t + rng.uniform(0, 2 * np.pi))
        amps = (rng.uniform(0, self.max_interference, size=len(self.interference_cycles))
                if interference is None else np.asarray(interference, dtype=np.float64))
        phases = rng.uniform(0, 2 * np.pi, size=len(self.interference_cycles))
        mix = sum(a * np.sin(w * c * t + p) for a, c, p in zip(amps, self.interference_cycles, phases))
        noise = self.noise_std * rng.standard_normal(self.length)
        return clean + mix + noise, clean, float(np.sum(amps ** 2) / 2)

    def reset(self, seed=None):
        self._signal, _, self._power = self.sample_signal(_rng(seed))
        self._t = 0
        return np.array([self._signal[0]])

    def step(self, state, action=None):
        if self._signal is None:
            raise UsageError("call reset() before step()")
        self._t += 1
        done = self._t >= self.length - 1
        return np.array([self._signal[min(self._t, self.length - 1)]]), -self._power, done


ENVS = {"maze": PointMaze2D, "linear": LinearSystem, "integrator": integrator, "freq1d": Freq1DTask}


def make_env(name, **params):
    params = {k: v for k, v in params.items() if k != "name"}
    try:
        factory = ENVS[name]
    except KeyError:
        raise ConfigError(f"unknown environment {name!r}; available: {sorted(ENVS)}") from None
    return factory(**params)


DATASET_KEYS = ("tier", "seed")  # recorded next to env params in dataset headers


def env_from_params(params):
    params = {k: v for k, v in params.items() if k not in DATASET_KEYS}
    return make_env(params.pop("name"), **params)


# behaviour policies -------------------------------------------------------------

def scripted_policy(env, tier, rng):
    """Per-episode action function for a behaviour tier (mixed picks medium or expert)."""
    if tier not in TIERS:
        raise ConfigError(f"unknown policy tier {tier!r}")
    if tier == "mixed":
        tier = "medium" if rng.random() < 0.5 else "expert"
    if tier == "random":
        return lambda s: env.random_action(rng)
    p = TIER_NOISE[tier]

    def act(s):
        if rng.random() < p:
            return env.random_action(rng)
        return env.controller(s)

    return act


def rollout_policy(env, policy, rng, max_steps=None):
    """Run one episode; the final (terminal or timed-out) state is appended
    with a zero action and zero reward."""
    max_steps = env.max_steps if max_steps is None else max_steps
    s = env.reset(rng)
    states, actions, rewards = [], [], []
    for _ in range(max_steps):
        a = np.asarray(policy(s), dtype=np.float64)
        nxt, r, done = env.step(s, a)
        states.append(s)
        actions.append(a)
        rewards.append(r)
        s = nxt
        if done:
            break
    states.append(s)
    actions.append(np.zeros(env.spec.d_a))
    rewards.append(0.0)
    return np.array(states), np.array(actions), np.array(rewards)


def generate_dataset(env, policy_tier, n_traj, seed, gamma=1.0):
    if n_traj < 1:
        raise UsageError("n_traj must be >= 1")
    rng = np.random.default_rng(seed)
    trajs = []
    if isinstance(env, Freq1DTask):
        gamma = env.gamma
        for _ in range(n_traj):
            sig, _, power = env.sample_signal(rng)
            rewards = np.full(env.length, -power)
            trajs.append(Trajectory.from_rewards(sig[:, None], np.zeros((env.length, 0)), rewards, gamma))
    else:
        for _ in range(n_traj):
            pol = scripted_policy(env, policy_tier, rng)
            s, a, r = rollout_policy(env, pol, rng)
            trajs.append(Trajectory(s, a, r, compute_returns_to_go(r, gamma)))
    meta = dict(env.params())
    meta["tier"] = policy_tier
    meta["seed"] = int(seed) if not isinstance(seed, np.random.Generator) else None
    return OfflineDataset(trajs, gamma=gamma, env=meta)


def policy_returns(env, tier, n_episodes, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_episodes):
        _, _, r = rollout_policy(env, scripted_policy(env, tier, rng), rng)
        out.append(float(r.sum()))
    return np.array(out)


# spectra -----------------------------------------------------------------------------

def spectrum(signal):
    """One-sided DFT power per bin k / T (bin resolution 1/T).

    Normalised so the bins sum to mean(signal ** 2).
    """
    x = np.asarray(signal, dtype=np.float64).reshape(-1)
    n = x.size
    if n < 8:
        raise UsageError("spectrum needs at least 8 samples")
    p = np.abs(np.fft.rfft(x)) ** 2 / (n * n)
    if n % 2 == 0:
        p[1:-1] *= 2.0
    else:
        p[1:] *= 2.0
    return p


def off_band_power(power, primary_bin):
    return float(np.sum(power) - power[primary_bin])
