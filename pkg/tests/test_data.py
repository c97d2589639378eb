import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from tdplan import data
from tdplan.data import (
    Normalizer,
    OfflineDataset,
    Trajectory,
    compute_returns_to_go,
    dumps_dataset,
    load_dataset,
    loads_dataset,
    sample_batch,
    save_dataset,
)
from tdplan.errors import DimensionError, ParseError, UsageError


def rtg_oracle(rewards, gamma):
    # direct discounted sums, independent of the backward recursion
    r = np.asarray(rewards, dtype=float)
    return np.array([sum(gamma ** (j - t) * r[j] for j in range(t, len(r))) for t in range(len(r))])


def toy_dataset(lengths=(5, 8, 3), d_s=2, d_a=1, gamma=1.0, seed=0):
    r = np.random.default_rng(seed)
    trajs = [Trajectory.from_rewards(r.standard_normal((n, d_s)), r.standard_normal((n, d_a)),
                                     r.standard_normal(n), gamma) for n in lengths]
    return OfflineDataset(trajs, gamma=gamma, env={"name": "toy"})


def test_rtg_examples():
    assert compute_returns_to_go([1, 2, 3], 1.0).tolist() == [6.0, 5.0, 3.0]
    assert compute_returns_to_go([1, 2, 3], 0.5).tolist() == [2.75, 3.5, 3.0]


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=30), st.floats(0.0, 1.0))
def test_rtg_matches_direct_sum(rewards, gamma):
    np.testing.assert_allclose(compute_returns_to_go(rewards, gamma), rtg_oracle(rewards, gamma),
                               rtol=1e-10, atol=1e-9)


def test_rtg_errors():
    with pytest.raises(UsageError):
        compute_returns_to_go([], 1.0)
    with pytest.raises(UsageError):
        compute_returns_to_go([1.0], 1.5)


def test_trajectory_length_mismatch():
    with pytest.raises(DimensionError):
        Trajectory(np.zeros((3, 2)), np.zeros((2, 1)), np.zeros(3), np.zeros(3))


def test_dataset_stats():
    ds = toy_dataset()
    alls = np.concatenate([t.states for t in ds.trajectories])
    normed = ds.normalizer().normalize_state(alls)
    np.testing.assert_allclose(normed.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(normed.std(axis=0), 1.0, atol=1e-10)
    assert ds.rtg_scale == max(np.abs(t.returns_to_go).max() for t in ds.trajectories)
    flat = OfflineDataset([Trajectory.from_rewards(np.ones((3, 1)), np.zeros((3, 1)), np.zeros(3))])
    assert flat.rtg_scale == 1.0
    assert flat.state_std[0] == data.STD_FLOOR


@given(arrays(np.float64, (6, 3), elements=st.floats(-1e3, 1e3)))
def test_normalize_round_trip(x):
    norm = Normalizer(np.array([1.0, -2.0, 0.5]), np.array([0.3, 2.0, 7.0]), 4.0)
    np.testing.assert_allclose(norm.denormalize_state(norm.normalize_state(x)), x, rtol=0, atol=1e-12 * 1e3)
    assert np.array_equal(Normalizer(np.zeros(3), np.ones(3)).normalize_state(x), x)


def test_missing_stats():
    with pytest.raises(UsageError):
        Normalizer().normalize_state(np.ones(2))


# batching -------------------------------------------------------------------------

def test_batch_deterministic_and_aligned():
    ds = toy_dataset()
    a = sample_batch(ds, 4, 64, seed=3)
    b = sample_batch(ds, 4, 64, seed=3)
    for f in ("states", "rtgs", "target_states", "target_rtgs", "mask", "starts"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    norm = ds.normalizer()
    for i in range(64):
        traj = ds.trajectories[a.traj_index[i]]
        for p in range(4):
            t = a.starts[i] + p
            if a.mask[i, p]:
                assert 0 <= t < len(traj) - 1
                np.testing.assert_array_equal(a.states[i, p], norm.normalize_state(traj.states[t]))
                np.testing.assert_array_equal(a.target_states[i, p], norm.normalize_state(traj.states[t + 1]))
                assert a.target_rtgs[i, p] == norm.scale_rtg(traj.returns_to_go[t + 1])
            else:
                assert t < 0
                assert not a.states[i, p].any() and a.rtgs[i, p] == 0
        assert a.mask[i, -1] == 1


def test_batch_start_distribution_uniform():
    ds = toy_dataset()
    n = 100_000
    b = sample_batch(ds, 3, n, seed=11)
    ends = b.starts + 3 - 1
    cells = [(i, e) for i, t in enumerate(ds.trajectories) for e in range(len(t) - 1)]
    index = {c: k for k, c in enumerate(cells)}
    counts = np.bincount([index[(ti, e)] for ti, e in zip(b.traj_index, ends)], minlength=len(cells))
    chi2, p = stats.chisquare(counts)
    assert p > 1e-3, (chi2, p)


def test_batch_errors():
    ds = toy_dataset()
    with pytest.raises(UsageError):
        sample_batch(ds, 0, 4, seed=0)
    with pytest.raises(UsageError):
        sample_batch(None, 3, 4, seed=0)
    single = OfflineDataset([Trajectory.from_rewards(np.zeros((1, 1)), np.zeros((1, 1)), [1.0])])
    with pytest.raises(UsageError):
        sample_batch(single, 3, 4, seed=0)


def test_state_windows_pad_with_final_state():
    ds = toy_dataset(lengths=(3,))
    x0, y = data.sample_state_windows(ds, 6, 50, np.random.default_rng(0))
    norm = ds.normalizer()
    last = norm.normalize_state(ds.trajectories[0].states[-1])
    for w in x0:
        assert np.array_equal(w[-1], last)
    x0, _ = data.sample_state_windows(toy_dataset(lengths=(10,)), 4, 200, np.random.default_rng(0), pad_tail=False)
    assert len({w.tobytes() for w in x0}) == 7  # only the 7 windows that fit


# persistence ------------------------------------------------------------------------

def test_dataset_round_trip_exact(tmp_path):
    ds = toy_dataset(gamma=0.9)
    path = tmp_path / "d.jsonl"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.gamma == 0.9 and back.env == {"name": "toy"} and len(back) == 3
    for a, b in zip(ds.trajectories, back.trajectories):
        for f in ("states", "actions", "rewards", "returns_to_go"):
            assert np.array_equal(getattr(a, f), getattr(b, f))
    assert dumps_dataset(back) == path.read_text()


def test_action_free_round_trip():
    t = Trajectory.from_rewards(np.arange(4.0)[:, None], np.zeros((4, 0)), np.ones(4), 0.9)
    back = loads_dataset(dumps_dataset(OfflineDataset([t], gamma=0.9)))
    assert back.d_a == 0 and back.trajectories[0].actions.shape == (4, 0)


def test_truncated_file_raises():
    text = dumps_dataset(toy_dataset())
    lines = text.splitlines()
    with pytest.raises(ParseError, match="line"):
        loads_dataset("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ParseError) as exc:
        loads_dataset(text[: len(text) // 2])
    assert exc.value.line is not None


def test_parse_error_diagnostics():
    lines = dumps_dataset(toy_dataset()).splitlines()
    rec = json.loads(lines[2])
    rec["returns_to_go"][0] += 1.0
    bad = "\n".join([lines[0], lines[1], json.dumps(rec), lines[3]])
    with pytest.raises(ParseError) as exc:
        loads_dataset(bad)
    assert exc.value.line == 3 and exc.value.field == "returns_to_go"
    rec = json.loads(lines[1])
    del rec["states"]
    with pytest.raises(ParseError) as exc:
        loads_dataset("\n".join([lines[0], json.dumps(rec)] + lines[2:]))
    assert (exc.value.line, exc.value.field) == (2, "states")
    with pytest.raises(ParseError) as exc:
        loads_dataset('{"format": "other"}\n')
    assert exc.value.field == "format"
    with pytest.raises(ParseError):
        loads_dataset("")


def test_loaded_rtg_matches_recursion():
    back = loads_dataset(dumps_dataset(toy_dataset(gamma=0.97)))
    for t in back.trajectories:
        np.testing.assert_allclose(t.returns_to_go, rtg_oracle(t.rewards, 0.97), atol=1e-9)
