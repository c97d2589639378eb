import numpy as np
import pytest

from tdplan import diffusion as D
from tdplan import envs, nn
from tdplan.ar import ARConfig, ARModel, train_ar
from tdplan.errors import ConfigError, EnvironmentFault, UsageError
from tdplan.invdyn import InvDynConfig, InvDynModel, train_invdyn
from tdplan.planner import PlanConfig, Planner, PlannerModels, run_episode, update_rtg


@pytest.fixture(scope="module")
def models():
    ds = envs.generate_dataset(envs.integrator(), "mixed", 20, seed=0)
    ar = ARModel(ARConfig(2, n_layers=1, n_heads=2, embed_dim=16, context=8), seed=0)
    train_ar(ar, ds, steps=10, batch_size=8)
    den = D.Denoiser(D.DenoiserConfig(2, horizon=8, channels=(4, 8), kernel=3, embed_dim=8, mlp_hidden=8,
                                      groups=2), seed=0)
    D.train_denoiser(den, ds, D.build_schedule(20), steps=5, batch_size=8)
    inv = InvDynModel(InvDynConfig(2, 2, 16), seed=0)
    train_invdyn(ds, inv, steps=10, batch_size=16)
    return PlannerModels(ar, den, inv)


def observations(n=6, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, size=(n, 2))


def test_update_rtg():
    assert update_rtg(1.0, 0.25) == 0.75
    assert update_rtg(0.5, 2.0) == 0.0
    assert update_rtg(3.0, 1.0, "constant") == 3.0
    with pytest.raises(ConfigError):
        update_rtg(1.0, 0.0, "halve")


@pytest.mark.parametrize("improve_steps", [0, 1, 5, 20])
def test_nfe_and_ar_forward_counts(models, improve_steps):
    p = Planner(models, PlanConfig(improve_steps=improve_steps))
    for obs in observations():
        action, planned = p.plan_step(obs)
        assert action.shape == (2,) and planned.shape == (7, 2)
    assert p.nfe_per_action == 2 * improve_steps
    assert p.ar_forwards == 6 * 7


def test_ablated_planner_makes_no_denoiser_calls(models):
    p = Planner(models, PlanConfig(improve_enabled=False))
    for obs in observations():
        p.plan_step(obs)
    assert p.nfe_per_action == 0 and p.counter.denoiser == 0


def test_drafts_are_identical_with_and_without_optimisation(models):
    full = Planner(models, PlanConfig(improve_steps=5))
    ablated = Planner(models, PlanConfig(improve_enabled=False))
    for obs in observations():
        plan = full.plan(obs)
        assert np.array_equal(full.last_draft, ablated.plan(obs))
        assert np.array_equal(plan[0], obs) and np.array_equal(full.last_draft[0], obs)
        assert not np.array_equal(plan, full.last_draft)


def test_minimal_history_and_plan(models):
    p = Planner(models, PlanConfig(history=1, plan_steps=1))
    for obs in observations(3):
        _, planned = p.plan_step(obs)
        assert planned.shape == (1, 2) and len(p.states) == 1
    assert p.ar_forwards == 3 and p.nfe_per_action == 10


def test_history_buffer_is_bounded(models):
    p = Planner(models, PlanConfig(history=4, improve_enabled=False))
    for obs in observations(10):
        p.plan(obs)
    assert len(p.states) == 4 and len(p.rtgs) == 4


def test_reset_restores_determinism(models):
    p = Planner(models, PlanConfig(), seed=3)
    first = [p.plan_step(o)[0] for o in observations()]
    p.reset()
    again = [p.plan_step(o)[0] for o in observations()]
    assert all(np.array_equal(a, b) for a, b in zip(first, again))
    p.reset(seed=4)
    other = [p.plan_step(o)[0] for o in observations()]
    assert not all(np.array_equal(a, b) for a, b in zip(first, other))


def test_rtg_tracking_and_condition_source(models):
    cfgs = {src: PlanConfig(target_rtg=5.0, cond_source=src) for src in ("target", "current")}
    plans = {}
    for src, cfg in cfgs.items():
        p = Planner(models, cfg, seed=0)
        p.plan(np.zeros(2))
        p.observe_reward(2.0)
        assert p.rtg == 3.0
        plans[src] = p.plan(np.ones(2))
    assert not np.array_equal(plans["target"], plans["current"])
    p = Planner(models, PlanConfig(target_rtg=5.0, rtg_mode="constant"))
    p.observe_reward(2.0)
    assert p.rtg == 5.0


def test_action_free_planner_returns_no_action(models):
    p = Planner(PlannerModels(models.ar, models.denoiser), PlanConfig())
    action, planned = p.plan_step(np.zeros(2))
    assert action is None and planned.shape == (7, 2)


def test_run_episode_is_deterministic(models):
    env = envs.integrator(max_steps=5)
    a = run_episode(env, models, PlanConfig(), seed=7)
    b = run_episode(env, models, PlanConfig(), seed=7)
    assert (a.ret, a.steps, a.nfe_total, a.ar_forwards) == (b.ret, b.steps, b.nfe_total, b.ar_forwards)
    assert a.steps == 5 and a.nfe_per_action == 10 and a.ar_forwards == 35
    rec = a.to_record(timings=False)
    assert "latency_mean" not in rec and rec["length"] == 5
    assert a.to_record()["latency_p95"] >= a.to_record()["latency_p50"]


def test_noop_policy_scores_zero_on_maze():
    maze = envs.PointMaze2D()
    res = run_episode(maze, None, PlanConfig(), seed=0, policy=lambda s: np.zeros(2))
    assert res.ret == 0.0 and res.steps == maze.max_steps and not res.success


def test_environment_fault(models):
    class Broken:
        name = "broken"
        max_steps = 3

        def reset(self, rng):
            return np.zeros(2)

        def step(self, s, a):
            raise FloatingPointError("diverged")

    with pytest.raises(EnvironmentFault, match="broken"):
        run_episode(Broken(), models, PlanConfig(improve_enabled=False), seed=0)


def test_configuration_errors(models):
    untrained = PlannerModels(ARModel(ARConfig(2, context=8)), models.denoiser, models.invdyn)
    with pytest.raises(UsageError):
        Planner(untrained, PlanConfig())
    fresh_den = D.Denoiser(models.denoiser.config)
    with pytest.raises(UsageError):
        Planner(PlannerModels(models.ar, fresh_den, models.invdyn), PlanConfig())
    with pytest.raises(UsageError):
        Planner(PlannerModels(models.ar), PlanConfig())
    with pytest.raises(ConfigError):
        Planner(PlannerModels(models.ar), PlanConfig(improve_enabled=False))
    with pytest.raises(ConfigError):
        Planner(models, PlanConfig(improve_steps=21))
    with pytest.raises(ConfigError):
        Planner(models, PlanConfig(plan_steps=2))  # length 3 is not a multiple of 2
    for bad in (dict(rtg_mode="x"), dict(cond_source="x"), dict(history=0), dict(omega=-1.0)):
        with pytest.raises(ConfigError):
            PlanConfig(**bad)


def test_models_load(models, tmp_path):
    with pytest.raises(UsageError):
        PlannerModels.load(tmp_path)
    models.ar.save(tmp_path / "ar.ckpt")
    models.denoiser.save(tmp_path / "diffusion.ckpt")
    loaded = PlannerModels.load(tmp_path)
    assert loaded.invdyn is None
    obs = observations()
    a, b = Planner(models, PlanConfig()), Planner(loaded, PlanConfig())
    assert all(np.array_equal(a.plan(o), b.plan(o)) for o in obs)
