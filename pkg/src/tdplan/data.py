"""Trajectories, returns-to-go, offline datasets and window sampling.

On-disk format (line-delimited JSON, one object per line)::

    {"format": "tdplan-dataset", "version": 1, "d_s": 2, "d_a": 2,
     "gamma": 1.0, "n_trajectories": 3, "env": {...}}
    {"states": [[...], ...], "actions": [[...], ...],
     "rewards": [...], "returns_to_go": [...]}
    ...

Floats are written with Python's shortest round-trip repr, so a save/load
cycle reproduces every array exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, ParseError, UsageError

FORMAT_NAME = "tdplan-dataset"
FORMAT_VERSION = 1
STD_FLOOR = 1e-8


def compute_returns_to_go(rewards, gamma=1.0):
    """Backward recursion R[t] = r[t] + gamma * R[t+1], with R[T-1] = r[T-1]."""
    r = np.asarray(rewards, dtype=np.float64).reshape(-1)
    if r.size == 0:
        raise UsageError("returns-to-go of an empty reward sequence")
    if not 0.0 <= gamma <= 1.0:
        raise UsageError(f"gamma must lie in [0, 1], got {gamma}")
    out = np.empty_like(r)
    acc = 0.0
    for t in range(r.size - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    returns_to_go: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64).reshape(-1)
        T = self.rewards.shape[0]
        if T < 1:
            raise DimensionError("trajectory needs at least one step")
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.returns_to_go = np.asarray(self.returns_to_go, dtype=np.float64).reshape(-1)
        # 1-d inputs are read as one scalar per step; an empty action array means d_a = 0
        if self.states.ndim == 1:
            self.states = self.states.reshape(-1, 1)
        if self.actions.size == 0:
            self.actions = np.zeros((T, 0))
        elif self.actions.ndim == 1:
            self.actions = self.actions.reshape(-1, 1)
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise DimensionError("states and actions must be (T, d) arrays")
        lens = {len(self.states), len(self.actions), T, len(self.returns_to_go)}
        if len(lens) != 1:
            raise DimensionError(f"trajectory arrays disagree on length: {sorted(lens)}")

    @classmethod
    def from_rewards(cls, states, actions, rewards, gamma=1.0):
        return cls(states, actions, rewards, compute_returns_to_go(rewards, gamma))

    def __len__(self):
        return len(self.rewards)

    @property
    def total_return(self):
        return float(np.sum(self.rewards))


@dataclass
class OfflineDataset:
    trajectories: list
    gamma: float = 1.0
    env: dict = field(default_factory=dict)
    state_mean: np.ndarray = None
    state_std: np.ndarray = None
    rtg_scale: float = 1.0

    def __post_init__(self):
        if not self.trajectories:
            raise UsageError("dataset has no trajectories")
        d_s = {t.states.shape[1] for t in self.trajectories}
        d_a = {t.actions.shape[1] for t in self.trajectories}
        if len(d_s) != 1 or len(d_a) != 1:
            raise DimensionError("all trajectories must share state and action dimensions")
        self.compute_stats()

    @property
    def d_s(self):
        return self.trajectories[0].states.shape[1]

    @property
    def d_a(self):
        return self.trajectories[0].actions.shape[1]

    def __len__(self):
        return len(self.trajectories)

    def compute_stats(self):
        alls = np.concatenate([t.states for t in self.trajectories])
        self.state_mean = alls.mean(axis=0)
        self.state_std = np.maximum(alls.std(axis=0), STD_FLOOR)
        peak = max(float(np.max(np.abs(t.returns_to_go))) for t in self.trajectories)
        self.rtg_scale = peak if peak > 0 else 1.0

    def normalizer(self):
        return Normalizer(self.state_mean, self.state_std, self.rtg_scale)

    def returns(self):
        return np.array([t.total_return for t in self.trajectories])


class Normalizer:
    """State standardisation and returns-to-go scaling, detached from any dataset."""

    def __init__(self, state_mean=None, state_std=None, rtg_scale=1.0):
        self.state_mean = None if state_mean is None else np.asarray(state_mean, dtype=np.float64)
        self.state_std = None if state_std is None else np.asarray(state_std, dtype=np.float64)
        self.rtg_scale = float(rtg_scale)

    def _check(self):
        if self.state_mean is None or self.state_std is None:
            raise UsageError("normalisation statistics have not been computed")

    def normalize_state(self, x):
        self._check()
        return (np.asarray(x, dtype=np.float64) - self.state_mean) / self.state_std

    def denormalize_state(self, x):
        self._check()
        return np.asarray(x, dtype=np.float64) * self.state_std + self.state_mean

    def scale_rtg(self, r):
        return np.asarray(r, dtype=np.float64) / self.rtg_scale

    def unscale_rtg(self, r):
        return np.asarray(r, dtype=np.float64) * self.rtg_scale

    def to_meta(self):
        return {"state_mean": self.state_mean.tolist(), "state_std": self.state_std.tolist(),
                "rtg_scale": self.rtg_scale}

    @classmethod
    def from_meta(cls, meta):
        return cls(meta["state_mean"], meta["state_std"], meta["rtg_scale"])


def normalize_state(dataset, x):
    return dataset.normalizer().normalize_state(x)


def denormalize_state(dataset, x):
    return dataset.normalizer().denormalize_state(x)


# batching -----------------------------------------------------------------

@dataclass
class Batch:
    """Right-aligned context windows for next-step prediction.

    Inputs at position i are timestep e-K+1+i of the source trajectory, where
    e is the window end; targets are the following timestep. ``mask`` is zero
    for left padding (timesteps before 0).
    """
    states: np.ndarray  # (B, K, d_s)
    rtgs: np.ndarray  # (B, K)
    target_states: np.ndarray  # (B, K, d_s)
    target_rtgs: np.ndarray  # (B, K)
    mask: np.ndarray  # (B, K) float 0/1
    starts: np.ndarray  # (B,) window start timestep (may be negative)
    traj_index: np.ndarray  # (B,)


def window_counts(dataset, window):
    # a trajectory of length T yields T-1 window ends (each needs a successor)
    return np.array([max(len(t) - 1, 0) for t in dataset.trajectories])


def sample_batch(dataset, window, batch_size, seed, normalizer=None):
    """Uniformly sample (trajectory, window end) pairs over all valid windows."""
    if window < 1:
        raise UsageError("context window must be >= 1")
    if dataset is None or len(dataset) == 0:
        raise UsageError("cannot sample from an empty dataset")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    norm = normalizer or dataset.normalizer()
    counts = window_counts(dataset, window)
    total = int(counts.sum())
    if total == 0:
        raise UsageError("no trajectory has a next-step target (all lengths are 1)")
    flat = rng.integers(0, total, size=batch_size)
    cum = np.cumsum(counts)
    tix = np.searchsorted(cum, flat, side="right")
    ends = flat - np.concatenate([[0], cum[:-1]])[tix]
    d_s = dataset.d_s
    S = np.zeros((batch_size, window, d_s))
    R = np.zeros((batch_size, window))
    TS = np.zeros((batch_size, window, d_s))
    TR = np.zeros((batch_size, window))
    M = np.zeros((batch_size, window))
    starts = ends - window + 1
    for b in range(batch_size):
        traj = dataset.trajectories[tix[b]]
        e = ends[b]
        lo = max(starts[b], 0)
        n = e - lo + 1
        S[b, window - n:] = norm.normalize_state(traj.states[lo:e + 1])
        R[b, window - n:] = norm.scale_rtg(traj.returns_to_go[lo:e + 1])
        TS[b, window - n:] = norm.normalize_state(traj.states[lo + 1:e + 2])
        TR[b, window - n:] = norm.scale_rtg(traj.returns_to_go[lo + 1:e + 2])
        M[b, window - n:] = 1.0
    return Batch(S, R, TS, TR, M, starts, tix)


def sample_state_windows(dataset, horizon, batch_size, rng, normalizer=None, pad_tail=True):
    """Sample length-``horizon`` normalised state windows and their start returns-to-go.

    Windows running past the end of a trajectory repeat its final state. With
    ``pad_tail=False`` starts are limited to windows that fit, except in
    trajectories shorter than ``horizon`` (which keep start 0 only).
    Returns (x0 (B, H, d_s), scaled rtg at the window start (B,)).
    """
    norm = normalizer or dataset.normalizer()
    lens = np.array([len(t) for t in dataset.trajectories])
    if not pad_tail:
        lens = np.maximum(lens - horizon + 1, 1)
    total = int(lens.sum())
    flat = rng.integers(0, total, size=batch_size)
    cum = np.cumsum(lens)
    tix = np.searchsorted(cum, flat, side="right")
    starts = flat - np.concatenate([[0], cum[:-1]])[tix]
    x0 = np.empty((batch_size, horizon, dataset.d_s))
    y = np.empty(batch_size)
    for b in range(batch_size):
        traj = dataset.trajectories[tix[b]]
        idx = np.minimum(np.arange(starts[b], starts[b] + horizon), len(traj) - 1)
        x0[b] = norm.normalize_state(traj.states[idx])
        y[b] = norm.scale_rtg(traj.returns_to_go[starts[b]])
    return x0, y


def transitions(dataset):
    """All (s_t, s_{t+1}, a_t) triples as stacked arrays."""
    s, sn, a = [], [], []
    for t in dataset.trajectories:
        if len(t) < 2:
            continue
        s.append(t.states[:-1])
        sn.append(t.states[1:])
        a.append(t.actions[:-1])
    if not s:
        raise UsageError("dataset has no transitions")
    return np.concatenate(s), np.concatenate(sn), np.concatenate(a)


# persistence ------------------------------------------------------------------

def _header(dataset):
    return {"format": FORMAT_NAME, "version": FORMAT_VERSION, "d_s": dataset.d_s,
            "d_a": dataset.d_a, "gamma": dataset.gamma,
            "n_trajectories": len(dataset), "env": dataset.env}


def dumps_dataset(dataset) -> str:
    lines = [json.dumps(_header(dataset), sort_keys=True)]
    for t in dataset.trajectories:
        rec = {"states": t.states.tolist(), "actions": t.actions.tolist(),
               "rewards": t.rewards.tolist(), "returns_to_go": t.returns_to_go.tolist()}
        lines.append(json.dumps(rec, sort_keys=True))
    return "\n".join(lines) + "\n"


def save_dataset(dataset, path):
    Path(path).write_text(dumps_dataset(dataset))


def _array(rec, key, lineno, ndim):
    if key not in rec:
        raise ParseError("missing field", line=lineno, field=key)
    try:
        arr = np.array(rec[key], dtype=np.float64)
    except (TypeError, ValueError):
        raise ParseError("not a numeric array", line=lineno, field=key) from None
    if ndim == 2 and arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 0)
    if arr.ndim != ndim:
        raise ParseError(f"expected {ndim}-d array, got {arr.ndim}-d", line=lineno, field=key)
    return arr


def loads_dataset(text, rtg_tol=1e-9) -> OfflineDataset:
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty dataset file", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"header is not JSON: {exc.msg}", line=1) from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise ParseError("missing or wrong format tag", line=1, field="format")
    if header.get("version") != FORMAT_VERSION:
        raise ParseError(f"unsupported version {header.get('version')}", line=1, field="version")
    for key in ("d_s", "d_a", "gamma", "n_trajectories"):
        if key not in header:
            raise ParseError("missing header field", line=1, field=key)
    d_s, d_a, gamma = int(header["d_s"]), int(header["d_a"]), float(header["gamma"])
    n = int(header["n_trajectories"])
    body = lines[1:]
    if len(body) != n:
        raise ParseError(f"header declares {n} trajectories but {len(body)} records follow",
                         line=len(lines), field="n_trajectories")
    trajs = []
    for i, line in enumerate(body, start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"record is not JSON: {exc.msg}", line=i) from None
        states = _array(rec, "states", i, 2)
        actions = _array(rec, "actions", i, 2)
        rewards = _array(rec, "rewards", i, 1)
        rtg = _array(rec, "returns_to_go", i, 1)
        T = len(rewards)
        if T < 1:
            raise ParseError("empty trajectory", line=i, field="rewards")
        if states.shape != (T, d_s):
            raise ParseError(f"shape {states.shape} != {(T, d_s)}", line=i, field="states")
        if actions.size == 0 and d_a == 0:
            actions = np.zeros((T, 0))
        if actions.shape != (T, d_a):
            raise ParseError(f"shape {actions.shape} != {(T, d_a)}", line=i, field="actions")
        if rtg.shape != (T,):
            raise ParseError(f"length {len(rtg)} != {T}", line=i, field="returns_to_go")
        expect = compute_returns_to_go(rewards, gamma)
        if np.max(np.abs(expect - rtg)) > rtg_tol:
            raise ParseError("returns_to_go disagree with rewards under the header gamma",
                             line=i, field="returns_to_go")
        trajs.append(Trajectory(states, actions, rewards, rtg))
    return OfflineDataset(trajs, gamma=gamma, env=header.get("env", {}))


def load_dataset(path) -> OfflineDataset:
    return loads_dataset(Path(path).read_text())
