"""Run configuration: a tree of plain dataclasses stored as JSON.

Every field has a default, so an empty file is a valid config. Unknown keys
are rejected rather than ignored.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .errors import ConfigError

CONFIG_VERSION = 1


@dataclass
class EnvSection:
    name: str = "maze"
    params: dict = field(default_factory=dict)
    max_steps: int | None = None  # None keeps the environment default
    tier: str = "mixed"
    n_traj: int = 300
    seed: int = 0


@dataclass
class ARSection:
    context: int = 32
    n_layers: int = 2
    n_heads: int = 2
    embed_dim: int = 64
    mlp_ratio: int = 4
    dropout: float = 0.0
    activation: str = "relu"
    steps: int = 20000
    batch_size: int = 32
    lr: float = 2e-4
    clip_norm: float = 1.0


@dataclass
class DiffusionSection:
    horizon: int = 16
    channels: list = field(default_factory=lambda: [32, 64])
    kernel: int = 5
    embed_dim: int = 64
    mlp_hidden: int = 128
    groups: int = 8
    K: int = 100
    schedule: str = "cosine"
    p_dropout: float = 0.5
    pad_tail: bool = True
    steps: int = 30000
    batch_size: int = 32
    lr: float = 2e-4
    clip_norm: float = 1.0


@dataclass
class InvDynSection:
    hidden: int = 128
    steps: int = 30000
    batch_size: int = 64
    lr: float = 1e-2
    lr_decay: bool = True


@dataclass
class PlanSection:
    history: int | None = None
    plan_steps: int | None = None
    improve_steps: int = 5
    omega: float = 1.2
    temperature: float = 0.5
    target_rtg: float = 1.0
    rtg_mode: str = "decrement"
    improve_enabled: bool = True
    rtg_feedback: bool = True
    cond_source: str = "target"


@dataclass
class EvalSection:
    n_seeds: int = 20
    ref_episodes: int = 100
    compare_ablated: bool = True


@dataclass
class BenchSection:
    n_actions: int = 1000
    n_full_actions: int = 20


@dataclass
class FreqSection:
    n_test: int = 10
    improve_steps: int = 5
    omega: float = 1.2
    target_rtg: float = 0.0


@dataclass
class RunConfig:
    env: EnvSection = field(default_factory=EnvSection)
    ar: ARSection = field(default_factory=ARSection)
    diff: DiffusionSection = field(default_factory=DiffusionSection)
    inv: InvDynSection = field(default_factory=InvDynSection)
    plan: PlanSection = field(default_factory=PlanSection)
    eval: EvalSection = field(default_factory=EvalSection)
    bench: BenchSection = field(default_factory=BenchSection)
    freq: FreqSection = field(default_factory=FreqSection)
    seed: int = 0
    out: str = "runs/default"

    def to_dict(self):
        d = asdict(self)
        d["version"] = CONFIG_VERSION
        return d

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        version = data.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version}")
        return _build(cls, data, "")

    @classmethod
    def loads(cls, text):
        try:
            data = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config root must be an object")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path):
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        return cls.loads(p.read_text())

    def with_overrides(self, assignments):
        """Apply ``section.key=value`` strings; values parse as JSON, else as strings."""
        data = self.to_dict()
        for item in assignments:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            set_dotted(data, key.strip(), _parse_value(raw))
        return RunConfig.from_dict(data)


def _parse_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def set_dotted(data, key, value):
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config section {key!r}")
        node = node[p]
    # env.params is free-form; everything else must already exist
    if parts[-1] not in node and not (len(parts) > 2 and parts[-2] == "params"):
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def _build(cls, data, prefix):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if is_dataclass(default):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {prefix + name!r} must be an object")
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)
