"""On-policy experience collection, observation normalization and GAE."""

from dataclasses import dataclass, field

import numpy as np

from .diffnet import forward, gauss_logp_np
from .kernels import gae_kernel

OBS_CLIP = 10.0
NORM_EPS = 1e-8
ADV_EPS = 1e-8


class RunningNormalizer:
    """Welford-style running mean/variance over the observation stream."""

    __slots__ = ("count", "mean", "m2")

    def __init__(self, dim):
        self.count = 0.0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    @property
    def var(self):
        if self.count < 1.0:
            return np.zeros_like(self.m2)
        return self.m2 / self.count

    def copy(self):
        out = RunningNormalizer(self.mean.shape[0])
        out.count = self.count
        out.mean = self.mean.copy()
        out.m2 = self.m2.copy()
        return out

    def update(self, obs):
        self.count += 1.0
        delta = obs - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (obs - self.mean)

    def normalize(self, obs, update):
        obs = np.asarray(obs, dtype=np.float64)
        if update:
            self.update(obs)
        scaled = (obs - self.mean) / np.sqrt(self.var + NORM_EPS)
        return np.clip(scaled, -OBS_CLIP, OBS_CLIP)

    def merge(self, other):
        """Fold another accumulator in (Chan's parallel combination)."""
        if other.count == 0.0:
            return
        total = self.count + other.count
        delta = other.mean - self.mean
        self.m2 = self.m2 + other.m2 + delta * delta * (self.count * other.count / total)
        self.mean = self.mean + delta * (other.count / total)
        self.count = total

    def state(self):
        return {"count": self.count, "mean": self.mean.tolist(), "m2": self.m2.tolist()}

    @classmethod
    def from_state(cls, state):
        out = cls(len(state["mean"]))
        out.count = float(state["count"])
        out.mean = np.asarray(state["mean"], dtype=np.float64)
        out.m2 = np.asarray(state["m2"], dtype=np.float64)
        return out


def normalize_obs(norm, obs, update):
    """Functional wrapper: returns (normalized obs, updated normalizer)."""
    norm = norm.copy()
    return norm.normalize(obs, update), norm


@dataclass
class RolloutBatch:
    obs: np.ndarray  # (T, obs_dim), normalized
    actions: np.ndarray  # (T, act_dim)
    logp_old: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,)
    values: np.ndarray  # (T,)
    dones: np.ndarray  # (T,) bool
    bootstrap_value: float
    advantages: np.ndarray = None
    returns: np.ndarray = None
    episode_returns: list = field(default_factory=list)

    @property
    def horizon(self):
        return self.obs.shape[0]


class RolloutError(RuntimeError):
    pass


def collect(env, policy, horizon, norm, rng, reward_fn=None):
    """Run `policy` for exactly `horizon` steps, resetting episodes as needed.

    Observations are normalized (and the normalizer updated) at collection
    time; the raw observations never enter the batch. `reward_fn` may remap
    a StepResult to a scalar training reward (used by the self-play
    curriculum); by default StepResult.reward is used.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    obs_dim, act_dim = env.obs_dim, env.act_dim
    obs = np.empty((horizon, obs_dim))
    actions = np.empty((horizon, act_dim))
    logp_old = np.empty(horizon)
    rewards = np.empty(horizon)
    values = np.empty(horizon)
    dones = np.zeros(horizon, dtype=bool)
    episode_returns = []

    raw_obs = env.reset(rng) if env.needs_reset else env.current_obs()
    ep_return = env.pending_return
    for t in range(horizon):
        nobs = norm.normalize(raw_obs, update=True)
        dists, vals = forward(policy, nobs[None, :])
        std = np.exp(dists.log_std)
        action = dists.means[0] + std * rng.standard_normal(act_dim)
        logp = gauss_logp_np(dists.means[0], dists.log_std, action)

        try:
            result = env.step(action)
        except Exception as exc:
            raise RolloutError(f"environment step failed at index {t}: {exc}") from exc

        obs[t] = nobs
        actions[t] = action
        logp_old[t] = logp
        rewards[t] = result.reward if reward_fn is None else reward_fn(result)
        values[t] = vals[0]
        dones[t] = result.done
        ep_return += result.reward

        if result.done:
            episode_returns.append(ep_return)
            ep_return = 0.0
            raw_obs = env.reset(rng)
        else:
            raw_obs = result.obs

    env.pending_return = ep_return
    final_nobs = norm.normalize(raw_obs, update=False)
    _, boot = forward(policy, final_nobs[None, :])
    return RolloutBatch(
        obs=obs, actions=actions, logp_old=logp_old, rewards=rewards,
        values=values, dones=dones, bootstrap_value=float(boot[0]),
        episode_returns=episode_returns,
    )


def compute_gae(batch, gamma=0.99, lam=0.95, standardize=True):
    """Fill in GAE advantages and returns; optionally standardize advantages."""
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ValueError("gamma and lam must lie in [0, 1]")
    adv = gae_kernel(
        batch.rewards, batch.values, batch.dones,
        float(batch.bootstrap_value), float(gamma), float(lam),
    )
    batch.returns = adv + batch.values
    if standardize:
        adv = standardize_advantages(adv)
    batch.advantages = adv
    return batch


def standardize_advantages(adv):
    return (adv - adv.mean()) / (adv.std() + ADV_EPS)


def merge_batches(batches):
    """Concatenate worker batches in worker order into one training batch.

    Per-worker advantages must already be computed (unstandardized);
    standardization happens over the merged batch.
    """
    merged = RolloutBatch(
        obs=np.concatenate([b.obs for b in batches]),
        actions=np.concatenate([b.actions for b in batches]),
        logp_old=np.concatenate([b.logp_old for b in batches]),
        rewards=np.concatenate([b.rewards for b in batches]),
        values=np.concatenate([b.values for b in batches]),
        dones=np.concatenate([b.dones for b in batches]),
        bootstrap_value=float("nan"),
        advantages=np.concatenate([b.advantages for b in batches]),
        returns=np.concatenate([b.returns for b in batches]),
        episode_returns=[r for b in batches for r in b.episode_returns],
    )
    merged.advantages = standardize_advantages(merged.advantages)
    return merged


def minibatches(n_samples, n_minibatches, rng):
    """A fresh seeded permutation split into equal contiguous chunks."""
    if n_samples % n_minibatches != 0:
        raise ValueError(
            f"n_minibatches ({n_minibatches}) must divide batch size ({n_samples})"
        )
    perm = rng.permutation(n_samples)
    return np.split(perm, n_minibatches)
