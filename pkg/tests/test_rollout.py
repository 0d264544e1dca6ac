import numpy as np
import pytest

from polcon.diffnet import NetworkSpec, init_network
from polcon.envs import make_env
from polcon.rollout import (
    RunningNormalizer,
    collect,
    compute_gae,
    merge_batches,
    minibatches,
    standardize_advantages,
)


def test_normalizer_matches_batch_stats():
    rng = np.random.default_rng(0)
    data = rng.normal(loc=3.0, scale=2.0, size=(200, 4))
    norm = RunningNormalizer(4)
    for row in data:
        norm.update(row)
    assert np.allclose(norm.mean, data.mean(axis=0), atol=1e-10)
    assert np.allclose(norm.var, data.var(axis=0), atol=1e-10)


def test_normalizer_alternating_stream():
    norm = RunningNormalizer(1)
    for i in range(100):
        norm.update(np.array([1.0 if i % 2 == 0 else -1.0]))
    assert abs(norm.mean[0]) < 1e-12
    assert norm.var[0] == pytest.approx(1.0, abs=1e-12)


def test_normalizer_clips_outliers():
    norm = RunningNormalizer(1)
    for v in (0.0, 1.0, 0.5, 0.7):
        norm.update(np.array([v]))
    out = norm.normalize(np.array([1e9]), update=False)
    assert out[0] == 10.0
    out = norm.normalize(np.array([-1e9]), update=False)
    assert out[0] == -10.0


def test_normalizer_merge_matches_sequential():
    rng = np.random.default_rng(1)
    a_data = rng.normal(size=(37, 3))
    b_data = rng.normal(loc=2.0, size=(53, 3))
    a = RunningNormalizer(3)
    b = RunningNormalizer(3)
    both = RunningNormalizer(3)
    for row in a_data:
        a.update(row)
        both.update(row)
    for row in b_data:
        b.update(row)
        both.update(row)
    a.merge(b)
    assert a.count == both.count
    assert np.allclose(a.mean, both.mean, atol=1e-10)
    assert np.allclose(a.var, both.var, atol=1e-10)


def test_normalizer_state_roundtrip():
    norm = RunningNormalizer(2)
    for row in np.random.default_rng(2).normal(size=(10, 2)):
        norm.update(row)
    restored = RunningNormalizer.from_state(norm.state())
    assert np.array_equal(restored.mean, norm.mean)
    assert np.array_equal(restored.m2, norm.m2)
    assert restored.count == norm.count


def _collect_small(seed=0, horizon=256):
    params = init_network(NetworkSpec(4, 2), seed=0)
    env = make_env("pointgoal-a")
    norm = RunningNormalizer(4)
    return collect(env, params, horizon, norm, np.random.default_rng(seed))


def test_collect_shapes_and_determinism():
    b1 = _collect_small(seed=5)
    b2 = _collect_small(seed=5)
    b3 = _collect_small(seed=6)
    assert b1.obs.shape == (256, 4)
    assert b1.actions.shape == (256, 2)
    assert np.array_equal(b1.obs, b2.obs)
    assert np.array_equal(b1.actions, b2.actions)
    assert b1.bootstrap_value == b2.bootstrap_value
    assert not np.array_equal(b1.actions, b3.actions)


def test_collect_episode_boundaries():
    batch = _collect_small(horizon=450)  # pointgoal episodes last 200 steps
    done_idx = np.flatnonzero(batch.dones)
    assert list(done_idx) == [199, 399]
    assert len(batch.episode_returns) == 2
    # normalized observations stay bounded
    assert np.max(np.abs(batch.obs)) <= 10.0


def test_collect_persists_episode_across_calls():
    params = init_network(NetworkSpec(4, 2), seed=0)
    env = make_env("pointgoal-a")
    norm = RunningNormalizer(4)
    rng = np.random.default_rng(0)
    b1 = collect(env, params, 150, norm, rng)
    assert not b1.dones.any()
    b2 = collect(env, params, 150, norm, rng)
    assert np.flatnonzero(b2.dones).tolist() == [49]
    total = b2.episode_returns[0]
    assert total == pytest.approx(b1.rewards.sum() + b2.rewards[:50].sum(), abs=1e-9)


def test_compute_gae_and_standardization():
    batch = _collect_small()
    batch = compute_gae(batch, 0.99, 0.95, standardize=True)
    assert batch.returns.shape == (256,)
    assert batch.advantages.mean() == pytest.approx(0.0, abs=1e-12)
    assert batch.advantages.std() == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(ValueError):
        compute_gae(batch, gamma=1.5)


def test_standardize_advantages():
    adv = standardize_advantages(np.array([1.0, 2.0, 3.0]))
    assert adv.mean() == pytest.approx(0.0, abs=1e-12)


def test_merge_batches_concatenates_in_order():
    b1 = compute_gae(_collect_small(seed=1), standardize=False)
    b2 = compute_gae(_collect_small(seed=2), standardize=False)
    merged = merge_batches([b1, b2])
    assert merged.obs.shape == (512, 4)
    assert np.array_equal(merged.obs[:256], b1.obs)
    assert np.array_equal(merged.obs[256:], b2.obs)
    assert merged.advantages.mean() == pytest.approx(0.0, abs=1e-12)


def test_minibatches_partition():
    rng = np.random.default_rng(0)
    parts = minibatches(64, 8, rng)
    assert len(parts) == 8
    flat = np.sort(np.concatenate(parts))
    assert np.array_equal(flat, np.arange(64))
    with pytest.raises(ValueError):
        minibatches(64, 7, rng)


def test_minibatches_fresh_permutation_each_call():
    rng = np.random.default_rng(0)
    p1 = np.concatenate(minibatches(64, 8, rng))
    p2 = np.concatenate(minibatches(64, 8, rng))
    assert not np.array_equal(p1, p2)
