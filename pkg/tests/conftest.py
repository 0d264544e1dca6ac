import numpy as np
import pytest

from polcon.diffnet import NetworkSpec, forward, init_network
from polcon.envs import make_env
from polcon.rollout import RunningNormalizer, collect, compute_gae


def numeric_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def max_rel_err(analytic, numeric, floor=1e-8):
    denom = np.maximum(np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def make_batch(params, horizon=64, seed=0, env_name="pointgoal-a"):
    """A small real rollout batch with GAE filled in."""
    env = make_env(env_name)
    norm = RunningNormalizer(env.obs_dim)
    batch = collect(env, params, horizon, norm, np.random.default_rng(seed))
    return compute_gae(batch)


def random_loss_inputs(spec, batch_size, rng):
    """Synthetic minibatch inputs consistent with a network's shapes."""
    obs = rng.normal(size=(batch_size, spec.obs_dim))
    actions = rng.normal(size=(batch_size, spec.act_dim))
    logp_old = rng.normal(size=batch_size) - 2.0
    advantages = rng.normal(size=batch_size)
    returns = rng.normal(size=batch_size)
    return obs, actions, logp_old, advantages, returns


@pytest.fixture
def small_spec():
    return NetworkSpec(obs_dim=3, act_dim=2, hidden_widths=(5, 4))


@pytest.fixture
def small_params(small_spec):
    return init_network(small_spec, seed=0)


def snapshot_dists(params, obs):
    dists, _ = forward(params, obs)
    return dists.means, dists.log_std
