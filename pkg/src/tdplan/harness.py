"""Training, evaluation, latency benchmarking, ablation sweeps and the spectral demo.

Everything here takes a RunConfig plus an output directory and writes
machine-readable files. Metric files never contain wall-clock values so that
reruns with the same config and seed are byte-identical; timings go to
separate files.
"""
from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffusion as D
from . import envs, nn
from .ar import ARConfig, ARModel, train_ar
from .config import RunConfig
from .data import load_dataset, save_dataset
from .errors import ConfigError, UsageError
from .invdyn import InvDynConfig, InvDynModel, train_invdyn
from .planner import PlanConfig, Planner, PlannerModels, run_episode

SCHEMA_VERSION = 1
ABLATION_AXES = ("improve_steps", "omega", "horizon", "rtg_fraction")
THREADS_ENV = "TRAJ_PLANNER_THREADS"


# io helpers ------------------------------------------------------------------------------

def _out(out):
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _write_loss_csv(path, losses):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses, 1):
            w.writerow([i, repr(float(v))])


def make_env(cfg: RunConfig):
    params = dict(cfg.env.params)
    if cfg.env.max_steps is not None:
        params["max_steps"] = cfg.env.max_steps
    return envs.make_env(cfg.env.name, **params)


def dataset_path(out):
    return Path(out) / "dataset.jsonl"


def _require_dataset(out):
    p = dataset_path(out)
    if not p.exists():
        raise UsageError(f"dataset not found at {p}; run 'dataset gen' first")
    return load_dataset(p)


# dataset and training -----------------------------------------------------------------

def cmd_dataset_gen(cfg: RunConfig, out):
    env = make_env(cfg)
    ds = envs.generate_dataset(env, cfg.env.tier, cfg.env.n_traj, cfg.env.seed)
    path = dataset_path(_out(out))
    save_dataset(ds, path)
    return ds, path


def dataset_summary(ds):
    lens = np.array([len(t) for t in ds.trajectories])
    rets = ds.returns()
    return {"n_trajectories": len(ds), "d_s": ds.d_s, "d_a": ds.d_a, "gamma": ds.gamma,
            "transitions": int(lens.sum()), "length_min": int(lens.min()), "length_max": int(lens.max()),
            "return_mean": float(rets.mean()), "return_std": float(rets.std()),
            "return_min": float(rets.min()), "return_max": float(rets.max()), "env": ds.env,
            "trajectories": [{"length": len(t), "return": t.total_return} for t in ds.trajectories]}


def build_ar(cfg: RunConfig, d_s):
    a = cfg.ar
    return ARModel(ARConfig(d_s, n_layers=a.n_layers, n_heads=a.n_heads, embed_dim=a.embed_dim,
                            context=a.context, dropout=a.dropout, mlp_ratio=a.mlp_ratio,
                            activation=a.activation), seed=cfg.seed)


def build_denoiser(cfg: RunConfig, d_s):
    d = cfg.diff
    return D.Denoiser(D.DenoiserConfig(d_s, horizon=d.horizon, channels=tuple(d.channels), kernel=d.kernel,
                                       embed_dim=d.embed_dim, mlp_hidden=d.mlp_hidden, groups=d.groups),
                      seed=cfg.seed)


def cmd_train_ar(cfg: RunConfig, out, dataset=None):
    ds = dataset if dataset is not None else _require_dataset(out)
    model = build_ar(cfg, ds.d_s)
    losses = train_ar(model, ds, cfg.ar.steps, cfg.ar.batch_size,
                      nn.AdamConfig(learning_rate=cfg.ar.lr), cfg.seed, cfg.ar.clip_norm)
    o = _out(out)
    model.save(o / "ar.ckpt")
    _write_loss_csv(o / "ar_loss.csv", losses)
    return model, losses


def cmd_train_diffusion(cfg: RunConfig, out, dataset=None):
    ds = dataset if dataset is not None else _require_dataset(out)
    model = build_denoiser(cfg, ds.d_s)
    sched = D.build_schedule(cfg.diff.K, cfg.diff.schedule)
    losses = D.train_denoiser(model, ds, sched, cfg.diff.steps, cfg.diff.p_dropout, cfg.diff.batch_size,
                              nn.AdamConfig(learning_rate=cfg.diff.lr), cfg.seed,
                              cfg.diff.clip_norm, pad_tail=cfg.diff.pad_tail)
    o = _out(out)
    model.save(o / "diffusion.ckpt")
    _write_loss_csv(o / "diffusion_loss.csv", losses)
    return model, losses


def cmd_train_invdyn(cfg: RunConfig, out, dataset=None):
    ds = dataset if dataset is not None else _require_dataset(out)
    model = InvDynModel(InvDynConfig(ds.d_s, ds.d_a, cfg.inv.hidden), seed=cfg.seed)
    losses = train_invdyn(ds, model, nn.AdamConfig(learning_rate=cfg.inv.lr), cfg.inv.steps,
                          cfg.seed, cfg.inv.batch_size, decay=cfg.inv.lr_decay)
    o = _out(out)
    model.save(o / "invdyn.ckpt")
    _write_loss_csv(o / "invdyn_loss.csv", losses)
    return model, losses


def load_models(out, need_invdyn=True):
    d = Path(out)
    required = ["ar.ckpt", "diffusion.ckpt"] + (["invdyn.ckpt"] if need_invdyn else [])
    missing = [n for n in required if not (d / n).exists()]
    if missing:
        raise UsageError(f"missing checkpoint(s) in {d}: {', '.join(missing)}")
    return PlannerModels.load(d)


# evaluation ---------------------------------------------------------------------------------

def plan_config(cfg: RunConfig, **overrides):
    return PlanConfig(**{**asdict(cfg.plan), **overrides})


def episode_seed(base_seed, index):
    """Per-episode seed derived from (base seed, episode index)."""
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def _threads():
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(n, 1)


def run_episodes(env, models, plan_cfg, n_seeds, base_seed, policy_factory=None):
    """Episodes for seeds derived from base_seed; order and values are thread-count independent."""

    def one(i):
        s = episode_seed(base_seed, i)
        policy = policy_factory(s) if policy_factory is not None else None
        return run_episode(env, models, plan_cfg, s, policy=policy)

    threads = min(_threads(), n_seeds)
    if threads == 1:
        return [one(i) for i in range(n_seeds)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(n_seeds)))


def reference_returns(env, tier, n_episodes, base_seed):
    """Returns of a scripted tier policy under the evaluation episode protocol."""

    def factory(seed):
        return envs.scripted_policy(env, tier, np.random.default_rng([seed, 2]))

    return np.array([r.ret for r in run_episodes(env, None, None, n_episodes, base_seed, factory)])


@dataclass
class References:
    random: float
    expert: float

    def normalize(self, score):
        span = self.expert - self.random
        if span == 0:
            raise UsageError("random and expert references coincide; normalized score undefined")
        return 100.0 * (score - self.random) / span


def compute_references(env, cfg: RunConfig):
    n = cfg.eval.ref_episodes
    return References(float(reference_returns(env, "random", n, cfg.seed + 1).mean()),
                      float(reference_returns(env, "expert", n, cfg.seed + 1).mean()))


@dataclass
class MetricsReport:
    label: str
    n_seeds: int
    mean_return: float
    std_return: float | None
    normalized_score: float | None
    normalized_std: float | None
    success_rate: float
    nfe_per_action: float
    ar_forwards_per_action: float
    seconds_per_action: float
    actions_per_second: float
    axis: str | None = None
    axis_value: float | None = None

    @classmethod
    def from_results(cls, label, results, refs=None, axis=None, axis_value=None):
        rets = np.array([r.ret for r in results])
        steps = sum(r.steps for r in results)
        lat = float(np.sum([np.sum(r.latencies) for r in results]))
        std = float(rets.std(ddof=1)) if len(rets) >= 2 else None
        norm = refs.normalize(float(rets.mean())) if refs else None
        nstd = (100.0 * std / (refs.expert - refs.random)) if (refs and std is not None) else None
        spa = lat / steps if steps else 0.0
        return cls(label, len(results), float(rets.mean()), std, norm, nstd,
                   float(np.mean([r.success for r in results])),
                   sum(r.nfe_total for r in results) / steps if steps else 0.0,
                   sum(r.ar_forwards for r in results) / steps if steps else 0.0,
                   spa, 1.0 / spa if spa > 0 else 0.0, axis, axis_value)

    def metrics_record(self):
        rec = {k: v for k, v in asdict(self).items() if k not in ("seconds_per_action", "actions_per_second")}
        rec["schema"] = SCHEMA_VERSION
        return rec

    def timing_record(self):
        return {"schema": SCHEMA_VERSION, "label": self.label, "axis": self.axis,
                "axis_value": self.axis_value, "seconds_per_action": self.seconds_per_action,
                "actions_per_second": self.actions_per_second}


def cmd_eval(cfg: RunConfig, out, models=None, n_seeds=None):
    """TD and (optionally) TD(-) side by side, normalised against scripted references."""
    env = make_env(cfg)
    models = models or load_models(out)
    n = n_seeds or cfg.eval.n_seeds
    refs = compute_references(env, cfg)
    settings = [("TD", plan_config(cfg))]
    if cfg.eval.compare_ablated:
        settings.append(("TD(-)", plan_config(cfg, improve_enabled=False)))
    reports = [MetricsReport.from_results(label, run_episodes(env, models, pc, n, cfg.seed), refs)
               for label, pc in settings]
    o = _out(out)
    ref_rec = {"schema": SCHEMA_VERSION, "label": "references", "random_ref": refs.random,
               "expert_ref": refs.expert, "ref_episodes": cfg.eval.ref_episodes}
    _write_jsonl(o / "metrics.jsonl", [ref_rec] + [r.metrics_record() for r in reports])
    _write_jsonl(o / "timings.jsonl", [r.timing_record() for r in reports])
    return reports, refs


# latency benchmark -----------------------------------------------------------------------------

def _latency_stats(lat):
    lat = np.asarray(lat)
    return {"mean": float(lat.mean()), "median": float(np.median(lat)), "p95": float(np.percentile(lat, 95))}


def cmd_bench_sps(cfg: RunConfig, out, models=None, dataset=None):
    """Seconds per action: decomposed planner vs. full-length denoising from noise.

    Both use the same denoiser; observations are dataset states.
    """
    models = models or load_models(out)
    ds = dataset if dataset is not None else _require_dataset(out)
    den = models.denoiser
    sched = den.schedule()
    rng = np.random.default_rng(cfg.seed)
    pool = np.concatenate([t.states for t in ds.trajectories])
    obs = pool[rng.integers(0, len(pool), size=max(cfg.bench.n_actions, cfg.bench.n_full_actions))]
    pc = plan_config(cfg, improve_enabled=True)
    planner = Planner(models, pc, cfg.seed)
    planner.plan_step(obs[0])  # warm-up: first calls pay one-off compilation and allocation costs
    lat_td = []
    for o in obs[:cfg.bench.n_actions]:
        planner.reset()
        t0 = time.perf_counter()
        planner.plan_step(o)
        lat_td.append(time.perf_counter() - t0)
    nfe_td = planner.counter.denoiser  # single action since the last reset
    H = planner.plan_steps + 1
    dn = den.normalizer
    y = float(dn.scale_rtg(pc.target_rtg))
    counter = D.NFECounter()
    lat_full = []
    for i, o in enumerate(obs[:cfg.bench.n_full_actions]):
        counter.denoiser = 0
        t0 = time.perf_counter()
        s0 = dn.normalize_state(o)
        plan = dn.denormalize_state(D.full_denoise(s0, H, y, pc.omega, pc.temperature,
                                                   np.random.default_rng([cfg.seed, i]), den, sched, counter))
        if models.invdyn is not None:
            inv = models.invdyn
            inv.predict_action(inv.normalizer.normalize_state(o), inv.normalizer.normalize_state(plan[1]))
        lat_full.append(time.perf_counter() - t0)
    nfe_full = counter.denoiser
    td, full = _latency_stats(lat_td), _latency_stats(lat_full)
    rec = {"schema": SCHEMA_VERSION, "K": sched.K, "improve_steps": pc.improve_steps, "horizon": H,
           "nfe_per_action_decomposed": nfe_td, "nfe_per_action_full": nfe_full,
           "nfe_ratio": nfe_full / nfe_td if nfe_td else None,
           "n_actions_decomposed": len(lat_td), "n_actions_full": len(lat_full),
           "seconds_per_action_decomposed": td, "seconds_per_action_full": full,
           "wallclock_ratio": full["mean"] / td["mean"], "backend": _backend()}
    _write_jsonl(_out(out) / "bench.jsonl", [rec])
    return rec


def _backend():
    from . import kernels
    return kernels.BACKEND


# ablation ---------------------------------------------------------------------------------------

def _axis_overrides(axis, value, expert_rtg):
    if axis == "improve_steps":
        return {"improve_steps": int(value)}
    if axis == "omega":
        return {"omega": float(value)}
    if axis == "horizon":
        return {"plan_steps": int(value) - 1}
    if axis == "rtg_fraction":
        return {"target_rtg": float(value) * expert_rtg}
    raise ConfigError(f"unknown ablation axis {axis!r}; available: {ABLATION_AXES}")


def cmd_ablate(cfg: RunConfig, out, axis, values, models=None, n_seeds=None):
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; available: {ABLATION_AXES}")
    if not values:
        raise UsageError("ablation needs at least one value")
    env = make_env(cfg)
    models = models or load_models(out)
    n = n_seeds or cfg.eval.n_seeds
    refs = compute_references(env, cfg)
    reports = []
    for v in sorted(values):
        pc = plan_config(cfg, **_axis_overrides(axis, v, refs.expert))
        reports.append(MetricsReport.from_results(f"{axis}={v}", run_episodes(env, models, pc, n, cfg.seed),
                                                  refs, axis, float(v)))
    o = _out(out)
    cols = ["axis", "value", "n_seeds", "mean_return", "std_return", "normalized_score",
            "normalized_std", "success_rate", "nfe_per_action"]
    with open(o / f"ablate_{axis}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in reports:
            w.writerow([axis, r.axis_value, r.n_seeds, r.mean_return, _blank(r.std_return),
                        r.normalized_score, _blank(r.normalized_std), r.success_rate, r.nfe_per_action])
    _write_jsonl(o / f"ablate_{axis}_timings.jsonl", [r.timing_record() for r in reports])
    return reports


def _blank(v):
    return "" if v is None else v


# frequency demo -----------------------------------------------------------------------------------

def freq_plan(task, models, signal, rtgs, improve_steps, omega, temperature, target_rtg, rng):
    """Draft the next window of ``signal`` with the AR model and refine it.

    The history is the first ``context`` samples; the plan is the current
    sample followed by ``horizon - 1`` drafted ones. Returns raw (draft, optimized).
    """
    ar, den = models.ar, models.denoiser
    K, H = ar.config.context, den.config.horizon
    norm = ar.normalizer
    hs = norm.normalize_state(signal[:K, None])
    planned, _ = ar.rollout(hs, norm.scale_rtg(rtgs[:K]), H - 1)
    draft = norm.denormalize_state(np.vstack([hs[-1:], planned]))
    dn = den.normalizer
    opt = D.optimize_trajectory(dn.normalize_state(draft), float(dn.scale_rtg(target_rtg)), improve_steps,
                                omega, temperature, rng, den, den.schedule())
    return draft[:, 0], dn.denormalize_state(opt)[:, 0]


def freq_demo(task, models, dataset, n_test, improve_steps, omega, temperature, target_rtg, seed):
    from .data import compute_returns_to_go
    H = models.denoiser.config.horizon
    rng = np.random.default_rng(seed)
    train_spec = np.mean([envs.spectrum(t.states[:H, 0]) for t in dataset.trajectories], axis=0)
    ar_specs, opt_specs, ar_bins, opt_bins, ar_off, opt_off = [], [], [], [], [], []
    for i in range(n_test):
        sig, _, power = task.sample_signal(rng)
        rtgs = compute_returns_to_go(np.full(task.length, -power), task.gamma)
        draft, opt = freq_plan(task, models, sig, rtgs, improve_steps, omega, temperature, target_rtg,
                               np.random.default_rng([seed, i]))
        sa, so = envs.spectrum(draft), envs.spectrum(opt)
        ar_specs.append(sa)
        opt_specs.append(so)
        ar_bins.append(int(np.argmax(sa)))
        opt_bins.append(int(np.argmax(so)))
        ar_off.append(envs.off_band_power(sa, int(np.argmax(train_spec))))
        opt_off.append(envs.off_band_power(so, int(np.argmax(train_spec))))
    primary = int(np.argmax(train_spec))
    summary = {
        "schema": SCHEMA_VERSION, "n_test": n_test, "horizon": H, "improve_steps": improve_steps,
        "omega": omega, "primary_bin": primary,
        "expected_bin": task.base_cycles * H // task.window,
        "ar_dominant_bins": ar_bins, "optimized_dominant_bins": opt_bins,
        "ar_off_band_power": float(np.mean(ar_off)), "optimized_off_band_power": float(np.mean(opt_off)),
    }
    summary["off_band_reduction"] = 1.0 - summary["optimized_off_band_power"] / summary["ar_off_band_power"]
    spectra = {"train_mean": train_spec, "ar_plan": np.mean(ar_specs, axis=0),
               "optimized_plan": np.mean(opt_specs, axis=0)}
    return summary, spectra


def cmd_freq_demo(cfg: RunConfig, out, models=None, dataset=None):
    env = make_env(cfg)
    if not isinstance(env, envs.Freq1DTask):
        raise ConfigError("freq-demo needs env.name = 'freq1d'")
    models = models or load_models(out, need_invdyn=False)
    ds = dataset if dataset is not None else _require_dataset(out)
    f = cfg.freq
    summary, spectra = freq_demo(env, models, ds, f.n_test, f.improve_steps, f.omega,
                                 cfg.plan.temperature, f.target_rtg, cfg.seed)
    o = _out(out)
    with open(o / "spectra.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "train_mean", "ar_plan", "optimized_plan"])
        for k in range(len(spectra["train_mean"])):
            w.writerow([k] + [repr(float(spectra[c][k])) for c in ("train_mean", "ar_plan", "optimized_plan")])
    (o / "freq_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary, spectra

