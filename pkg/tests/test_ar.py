import numpy as np
import pytest

from tdplan import ar, nn
from tdplan.data import Batch, OfflineDataset, Trajectory, sample_batch
from tdplan.errors import ConfigError, DimensionError, UsageError
from tdplan.nn.gradcheck import directional_check, leaf


def small_model(d=2, context=8, seed=0, **kw):
    cfg = dict(embed_dim=16, n_heads=2, n_layers=2)
    cfg.update(kw)
    return ar.ARModel(ar.ARConfig(d, context=context, **cfg), seed=seed)


def memo_trajectory():
    r = np.random.default_rng(0)
    t = np.arange(20)
    states = np.stack([np.sin(t / 3), np.cos(t / 4)], 1) + 0.1 * r.standard_normal((20, 2))
    return Trajectory.from_rewards(states, np.zeros((20, 1)), r.random(20))


def test_config_validation():
    with pytest.raises(ConfigError):
        ar.ARConfig(2, embed_dim=10, n_heads=3)
    with pytest.raises(ConfigError):
        ar.ARConfig(2, dropout=1.0)
    with pytest.raises(ConfigError):
        ar.ARConfig(2, backbone="gru")


def test_one_token_per_timestep_and_two_heads():
    m = small_model()
    ps, pr = m.forward(np.zeros((5, 2)), np.zeros(5))
    assert ps.shape == (5, 2) and pr.shape == (5,)
    assert m.store["head.state.weight"].shape == (16, 2)
    assert m.store["head.rtg.weight"].shape == (16, 1)


def test_zero_weights_give_zero_pre_norm_embedding(rng):
    m = small_model()
    for name in ("embed.state.weight", "embed.state.bias", "embed.rtg.weight", "embed.rtg.bias"):
        m.store[name].data = np.zeros_like(m.store[name].data)
    e = m.embed_pre_norm(rng.standard_normal((3, 2)), rng.standard_normal(3)).data
    assert not e.any()


def test_rtg_path_is_live(rng):
    m = small_model()
    s = rng.standard_normal(2)
    assert not np.allclose(m.embed_token(s, 0.1), m.embed_token(s, 0.9))


def test_forward_rejects_long_input():
    m = small_model(context=4)
    with pytest.raises(UsageError):
        m.forward(np.zeros((5, 2)), np.zeros(5))
    with pytest.raises(DimensionError):
        m.forward(np.zeros((3, 3)), np.zeros(3))


def test_forward_is_causal(rng):
    m = small_model()
    s, r = rng.standard_normal((8, 2)), rng.standard_normal(8)
    a = m.forward(s, r)
    s2, r2 = s.copy(), r.copy()
    s2[4] += 1.0
    r2[4] -= 0.5
    b = m.forward(s2, r2)
    assert np.array_equal(a[0].data[:4], b[0].data[:4])
    assert np.array_equal(a[1].data[:4], b[1].data[:4])
    assert not np.allclose(a[0].data[4:], b[0].data[4:])


@pytest.mark.parametrize("seed", range(5))
def test_full_model_gradient(seed):
    m = small_model(d=2, context=5, seed=seed, embed_dim=8, activation="gelu")
    r = np.random.default_rng(seed)
    s, rt = r.standard_normal((2, 5, 2)), r.standard_normal((2, 5))
    km = np.ones((2, 5), dtype=bool)
    km[0, :2] = False
    params = [t for _, t in m.store.items()]

    def fn():
        ps, pr = m.forward(s, rt, key_mask=km)
        return ps * 1.0 + pr.reshape(2, 5, 1)

    assert directional_check(fn, params, np.random.default_rng([seed, 5])) < 1e-4


def two_position_batch(rng, model):
    s, r = rng.standard_normal((1, 2, 2)), rng.standard_normal((1, 2))
    ts, tr = rng.standard_normal((1, 2, 2)), rng.standard_normal((1, 2))
    return Batch(s, r, ts, tr, np.array([[0.0, 1.0]]), np.array([-1]), np.array([0]))


def test_loss_hand_value_and_masking(rng):
    m = small_model()
    b = two_position_batch(rng, m)
    ps, pr = m.forward(b.states, b.rtgs, key_mask=b.mask > 0)
    # only position 1 is real: loss = ||ds||^2 + dr^2 there
    hand = np.sum((ps.data[0, 1] - b.target_states[0, 1]) ** 2) + (pr.data[0, 1] - b.target_rtgs[0, 1]) ** 2
    assert m.loss(b).item() == pytest.approx(hand, rel=1e-12)
    b.target_states[0, 0] += 100.0
    b.target_rtgs[0, 0] -= 7.0
    assert m.loss(b).item() == pytest.approx(hand, rel=0, abs=0)
    b.mask[:] = 0
    with pytest.raises(UsageError):
        m.loss(b)


def test_perfect_predictor_zero_loss(rng):
    m = small_model()
    b = two_position_batch(rng, m)
    ps, pr = m.forward(b.states, b.rtgs, key_mask=b.mask > 0)
    b.target_states[:] = ps.data
    b.target_rtgs[:] = pr.data
    assert m.loss(b).item() == 0.0


def test_rollout_edges_and_determinism(rng):
    m = small_model()
    hs, hr = rng.standard_normal((3, 2)), rng.standard_normal(3)
    before = hs.copy()
    fs, fr = m.rollout(hs, hr, 0)
    assert fs.shape == (0, 2) and fr.shape == (0,)
    assert np.array_equal(hs, before)
    a = m.rollout(hs, hr, 6)
    b = m.rollout(hs, hr, 6)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    const = m.rollout(hs, hr, 3, rtg_feedback=False)[1]
    assert np.all(const == hr[-1])
    with pytest.raises(UsageError):
        m.rollout(hs, hr, -1)
    with pytest.raises(DimensionError):
        m.rollout(hs, hr[:2], 2)


def test_rollout_feeds_most_recent_window(rng):
    # with window w the continuation only depends on the last w tokens
    m = small_model(context=8)
    hs, hr = rng.standard_normal((6, 2)), rng.standard_normal(6)
    a = m.rollout(hs, hr, 4, window=3)
    b = m.rollout(hs[-3:], hr[-3:], 4, window=3)
    assert np.array_equal(a[0], b[0])


@pytest.fixture(scope="module")
def memorized():
    traj = memo_trajectory()
    ds = OfflineDataset([traj])
    m = ar.ARModel(ar.ARConfig(2, context=20, embed_dim=32, n_heads=2, n_layers=2), seed=0)
    ar.train_ar(m, ds, 2000, batch_size=16, adam=nn.AdamConfig(1e-3))
    return m, ds


def test_memorization_next_step(memorized):
    m, ds = memorized
    t, norm = ds.trajectories[0], m.normalizer
    S, R = norm.normalize_state(t.states), norm.scale_rtg(t.returns_to_go)
    with nn.no_grad():
        ps, pr = m.forward(S[:-1], R[:-1])
    assert np.mean((ps.data - S[1:]) ** 2) < 1e-3


def test_memorization_rollout(memorized):
    m, ds = memorized
    t, norm = ds.trajectories[0], m.normalizer
    S, R = norm.normalize_state(t.states), norm.scale_rtg(t.returns_to_go)
    L = 5
    fut, _ = m.rollout(S[:L], R[:L], 20 - L)
    assert np.mean((fut - S[L:]) ** 2, axis=1).max() < 1e-2


def test_training_curve_decreases():
    r = np.random.default_rng(1)
    trajs = []
    for _ in range(100):
        phase = r.uniform(0, 2 * np.pi)
        t = np.arange(12)
        s = np.stack([np.sin(t / 2 + phase), np.cos(t / 2 + phase)], 1)
        trajs.append(Trajectory.from_rewards(s, np.zeros((12, 1)), r.random(12)))
    ds = OfflineDataset(trajs)
    m = small_model(context=8)
    losses = np.array(ar.train_ar(m, ds, 400, batch_size=16, adam=nn.AdamConfig(1e-3)))
    smooth = losses.reshape(-1, 50).mean(axis=1)
    assert np.all(np.diff(smooth) < 0), smooth


def test_save_load_round_trip(tmp_path, memorized):
    m, ds = memorized
    m.save(tmp_path / "ar.ckpt")
    back = ar.ARModel.load(tmp_path / "ar.ckpt")
    assert back.config == m.config and back.train_steps == m.train_steps
    s = ds.trajectories[0].states[:4]
    assert np.array_equal(back.forward(s, np.zeros(4))[0].data, m.forward(s, np.zeros(4))[0].data)
    back.save(tmp_path / "ar3.ckpt")
    assert (tmp_path / "ar3.ckpt").read_bytes() == (tmp_path / "ar.ckpt").read_bytes()


def test_training_is_deterministic():
    ds = OfflineDataset([memo_trajectory()])
    runs = []
    for _ in range(2):
        m = small_model(context=6)
        ar.train_ar(m, ds, 5, batch_size=4)
        runs.append(nn.checkpoint.dumps(m.store.state_dict(), m.meta()))
    assert runs[0] == runs[1]


def test_dropout_training_runs():
    ds = OfflineDataset([memo_trajectory()])
    m = small_model(context=6, dropout=0.1)
    losses = ar.train_ar(m, ds, 3, batch_size=4)
    assert len(losses) == 3 and m.trained
    b = sample_batch(ds, 6, 2, seed=0, normalizer=m.normalizer)
    assert np.isfinite(m.loss(b).item())
