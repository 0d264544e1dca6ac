import numpy as np
import pytest

from polcon.diffnet import NetworkSpec, forward, init_network
from polcon.ppo import (
    BETA_MAX,
    BETA_MIN,
    PpoAgent,
    PpoConfig,
    UpdateFailure,
    adaptive_beta,
    clipped_loss,
    fixed_kl_loss,
    mean_kl_to_snapshot,
    pg_term,
    value_loss,
)

from conftest import make_batch, random_loss_inputs, snapshot_dists


def test_config_validation():
    PpoConfig().validate()
    with pytest.raises(ValueError):
        PpoConfig(variant="trpo").validate()
    with pytest.raises(ValueError):
        PpoConfig(kl_direction="both").validate()
    with pytest.raises(ValueError):
        PpoConfig(beta=-1.0).validate()
    with pytest.raises(ValueError):
        PpoConfig(epochs=0).validate()


def test_clipped_never_exceeds_unclipped(small_params):
    rng = np.random.default_rng(0)
    spec = small_params.spec
    for _ in range(20):
        obs, actions, logp_old, adv, _ = random_loss_inputs(spec, 16, rng)
        unclipped = pg_term(small_params, obs, actions, logp_old, adv)
        clipped = clipped_loss(small_params, obs, actions, logp_old, adv)
        assert clipped <= unclipped + 1e-12


def test_fixed_kl_loss_at_snapshot_equals_pg(small_params):
    rng = np.random.default_rng(1)
    spec = small_params.spec
    obs, actions, logp_old, adv, _ = random_loss_inputs(spec, 12, rng)
    old_means, old_log_std = snapshot_dists(small_params, obs)
    with_kl = fixed_kl_loss(small_params, obs, actions, logp_old, adv,
                            old_means, old_log_std, beta=10.0)
    without = pg_term(small_params, obs, actions, logp_old, adv)
    assert with_kl == pytest.approx(without, abs=1e-12)


def test_value_loss_zero_for_perfect_fit(small_params):
    obs = np.random.default_rng(2).normal(size=(8, 3))
    _, values = forward(small_params, obs)
    assert value_loss(small_params, obs, values) == pytest.approx(0.0, abs=1e-15)
    assert value_loss(small_params, obs, values + 1.0) == pytest.approx(1.0, abs=1e-12)


def test_adaptive_beta_rules():
    assert adaptive_beta(1.0, measured_kl=0.1, d_targ=0.01) == 2.0
    assert adaptive_beta(1.0, measured_kl=0.001, d_targ=0.01) == 0.5
    # dead zone: within [d_targ/1.5, 1.5*d_targ] beta is unchanged
    assert adaptive_beta(1.0, measured_kl=0.01, d_targ=0.01) == 1.0
    assert adaptive_beta(1.0, measured_kl=0.0149, d_targ=0.01) == 1.0
    assert adaptive_beta(2 * BETA_MAX, measured_kl=1.0, d_targ=0.01) == BETA_MAX
    assert adaptive_beta(BETA_MIN, measured_kl=0.0, d_targ=0.01) == BETA_MIN
    with pytest.raises(ValueError):
        adaptive_beta(0.0, 0.01, 0.01)


def _train_one_update(variant, beta, seed=0, spec=None, **cfg_kwargs):
    spec = spec or NetworkSpec(4, 2)
    cfg = PpoConfig(variant=variant, beta=beta, epochs=4, n_minibatches=8,
                    **cfg_kwargs)
    agent = PpoAgent(spec, cfg, seed=seed)
    batch = make_batch(agent.params, horizon=128, seed=seed)
    metrics = agent.update(batch, np.random.default_rng(seed + 100))
    return agent, batch, metrics


def test_huge_beta_freezes_policy():
    agent_soft, batch, m_soft = _train_one_update("fixed_kl", beta=0.5, seed=3)
    agent_hard, _, m_hard = _train_one_update("fixed_kl", beta=1e6, seed=3)
    assert m_hard.kl_self_mean < m_soft.kl_self_mean * 1e-2
    assert m_hard.kl_self_mean < 1e-6


def test_beta_monotonically_tightens_kl():
    betas = (0.1, 1.0, 10.0, 100.0)
    violations = 0
    for seed in range(5):
        kls = [_train_one_update("fixed_kl", beta=b, seed=seed)[2].kl_self_mean
               for b in betas]
        violations += sum(1 for a, b in zip(kls, kls[1:]) if b >= a)
    assert violations <= 1


def test_update_returns_metrics_and_moves_params():
    agent, batch, metrics = _train_one_update("clipped", beta=0.5)
    assert np.isfinite(metrics.pg_loss)
    assert np.isfinite(metrics.vf_loss)
    assert metrics.kl_self_mean > 0.0
    assert metrics.beta == 0.5


def test_adaptive_variant_adapts_beta():
    agent, batch, metrics = _train_one_update("adaptive_kl", beta=0.5, stepsize=3e-3)
    # a large stepsize overshoots d_targ=0.01, so beta must have doubled
    assert metrics.beta in (1.0, 0.25, 0.5)
    measured = mean_kl_to_snapshot(agent.params, batch.obs,
                                   *snapshot_dists(agent.params, batch.obs))
    assert measured == pytest.approx(0.0, abs=1e-15)


def test_update_failure_restores_params():
    spec = NetworkSpec(4, 2)
    agent = PpoAgent(spec, PpoConfig(epochs=1, n_minibatches=4), seed=0)
    batch = make_batch(agent.params, horizon=64)
    batch.returns[:] = np.inf  # poison the value target
    before = agent.params.values.copy()
    before_adam = agent.adam.first_moment.copy()
    with pytest.raises(UpdateFailure):
        agent.update(batch, np.random.default_rng(0))
    assert np.array_equal(agent.params.values, before)
    assert np.array_equal(agent.adam.first_moment, before_adam)


def test_reverse_vs_forward_kl_directions_differ():
    a_rev, batch, _ = _train_one_update("fixed_kl", beta=0.5, seed=1,
                                        kl_direction="reverse")
    a_fwd, _, _ = _train_one_update("fixed_kl", beta=0.5, seed=1,
                                    kl_direction="forward")
    assert not np.array_equal(a_rev.params.values, a_fwd.params.values)


def test_ratio_clamp_counter():
    spec = NetworkSpec(4, 2)
    agent = PpoAgent(spec, PpoConfig(epochs=1, n_minibatches=2), seed=0)
    batch = make_batch(agent.params, horizon=32)
    batch.logp_old[:] = 100.0  # forces the log-ratio past the clamp
    metrics = agent.update(batch, np.random.default_rng(0))
    assert metrics.clamp_count > 0
