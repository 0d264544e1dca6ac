"""PPO baselines: clipped, fixed-KL (forward/reverse) and adaptive-KL.

The loss builders here are also the building blocks of the consolidation
cascade, which extends the fixed-KL objective to a chain of policies; both
code paths share these functions so that a cascade with all coupling
weights zeroed reproduces the fixed-KL baseline bit for bit.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import diffnet
from .rollout import minibatches

RATIO_CLAMP = 20.0
BETA_MIN = 1e-4
BETA_MAX = 1e4

VARIANTS = ("clipped", "fixed_kl", "adaptive_kl")


@dataclass
class PpoConfig:
    variant: str = "fixed_kl"
    clip_eps: float = 0.2
    beta: float = 0.5
    kl_direction: str = "reverse"
    d_targ: float = 0.01
    vf_coeff: float = 0.5
    entropy_coeff: float = 0.0
    epochs: int = 10
    n_minibatches: int = 64
    stepsize: float = 3e-4

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown PPO variant {self.variant!r}")
        if self.kl_direction not in ("forward", "reverse"):
            raise ValueError(f"unknown kl_direction {self.kl_direction!r}")
        for name in ("clip_eps", "beta", "d_targ", "vf_coeff", "entropy_coeff", "stepsize"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative")
        if self.variant != "clipped" and self.beta <= 0:
            raise ValueError("beta must be positive for KL variants")
        if self.epochs < 1 or self.n_minibatches < 1:
            raise ValueError("epochs and n_minibatches must be >= 1")
        return self


@dataclass
class UpdateMetrics:
    pg_loss: float
    vf_loss: float
    kl_self_mean: float
    clamp_count: int
    beta: float
    per_depth_kl: list = field(default_factory=list)


class UpdateFailure(RuntimeError):
    """Numeric failure during an update; parameters were restored."""


def ratio_tensor(mean_t, log_std_t, actions, logp_old, clamp_counter=None):
    """exp(logp_new - logp_old) with the log-difference clamped to +-20."""
    logp = ad.gauss_logp(mean_t, log_std_t, actions)
    diff = ad.sub(logp, ad.constant(logp_old))
    if clamp_counter is not None:
        clamp_counter[0] += int(np.sum(np.abs(diff.data) >= RATIO_CLAMP))
    return ad.exp(ad.clip(diff, -RATIO_CLAMP, RATIO_CLAMP))


def pg_objective(mean_t, log_std_t, actions, logp_old, advantages, clamp_counter=None):
    """Mean surrogate ratio * advantage (to be maximized)."""
    ratio = ratio_tensor(mean_t, log_std_t, actions, logp_old, clamp_counter)
    return ad.amean(ad.scale(ratio, advantages))


def clipped_objective(mean_t, log_std_t, actions, logp_old, advantages, clip_eps,
                      clamp_counter=None):
    """Pointwise min of the unclipped and ratio-clipped surrogates."""
    ratio = ratio_tensor(mean_t, log_std_t, actions, logp_old, clamp_counter)
    surr = ad.scale(ratio, advantages)
    surr_clip = ad.scale(ad.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps), advantages)
    return ad.amean(ad.minimum(surr, surr_clip))


def kl_tensor(mean_t, log_std_t, old_means, old_log_std, direction):
    """Per-state KL between the live policy and its frozen snapshot."""
    if direction == "reverse":  # KL(new || old)
        return ad.gauss_kl(mean_t, log_std_t, old_means, old_log_std)
    return ad.gauss_kl(old_means, old_log_std, mean_t, log_std_t)


def value_objective(hidden_t, w_value, b_value, returns):
    """Mean squared error of the value head against empirical returns."""
    v = ad.affine(hidden_t, w_value, b_value)
    err = ad.sub(v, ad.constant(np.asarray(returns, dtype=np.float64)[:, None]))
    return ad.amean(ad.square(err))


def build_ppo_loss(leaves, spec, cfg, beta, obs, actions, logp_old, advantages,
                   returns, old_means, old_log_std, clamp_counter=None):
    """Descent loss for one minibatch. Returns (loss, aux dict of floats)."""
    mean_t, log_std_t, hidden_t = diffnet.tape_forward(leaves, spec, obs)
    if cfg.variant == "clipped":
        pg = clipped_objective(mean_t, log_std_t, actions, logp_old, advantages,
                               cfg.clip_eps, clamp_counter)
        loss = ad.neg(pg)
    else:
        pg = pg_objective(mean_t, log_std_t, actions, logp_old, advantages, clamp_counter)
        kl_mean = ad.amean(kl_tensor(mean_t, log_std_t, old_means, old_log_std,
                                     cfg.kl_direction))
        loss = ad.add(ad.neg(pg), ad.scale(kl_mean, beta))
    vloss = value_objective(hidden_t, leaves["w_value"], leaves["b_value"], returns)
    loss = ad.add(loss, ad.scale(vloss, cfg.vf_coeff))
    if cfg.entropy_coeff > 0.0:
        ent = ad.gauss_entropy(log_std_t)
        loss = ad.add(loss, ad.scale(ent, -cfg.entropy_coeff))
    aux = {"pg": float(pg.data), "vf": float(vloss.data)}
    return loss, aux


def adaptive_beta(beta, measured_kl, d_targ):
    """Multiplicative adaptation with a dead zone, clamped for safety."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    if measured_kl > 1.5 * d_targ:
        beta = beta * 2.0
    elif measured_kl < d_targ / 1.5:
        beta = beta / 2.0
    return float(np.clip(beta, BETA_MIN, BETA_MAX))


def mean_kl_to_snapshot(params, obs, old_means, old_log_std, direction="reverse"):
    dists, _ = diffnet.forward(params, obs)
    if direction == "reverse":
        kl = diffnet.gauss_kl_np(dists.means, dists.log_std, old_means, old_log_std)
    else:
        kl = diffnet.gauss_kl_np(old_means, old_log_std, dists.means, dists.log_std)
    return float(kl.mean())


# Thin value-returning wrappers used by tests mirroring the loss contracts.

def pg_term(params, obs, actions, logp_old, advantages):
    leaves = diffnet.leaves_from(params)
    mean_t, log_std_t, _ = diffnet.tape_forward(leaves, params.spec, obs)
    return float(pg_objective(mean_t, log_std_t, actions, logp_old, advantages).data)


def clipped_loss(params, obs, actions, logp_old, advantages, clip_eps=0.2):
    leaves = diffnet.leaves_from(params)
    mean_t, log_std_t, _ = diffnet.tape_forward(leaves, params.spec, obs)
    return float(
        clipped_objective(mean_t, log_std_t, actions, logp_old, advantages, clip_eps).data
    )


def fixed_kl_loss(params, obs, actions, logp_old, advantages, old_means, old_log_std,
                  beta, direction="reverse"):
    leaves = diffnet.leaves_from(params)
    mean_t, log_std_t, _ = diffnet.tape_forward(leaves, params.spec, obs)
    pg = pg_objective(mean_t, log_std_t, actions, logp_old, advantages)
    kl = ad.amean(kl_tensor(mean_t, log_std_t, old_means, old_log_std, direction))
    return float(pg.data) - beta * float(kl.data)


def value_loss(params, obs, returns):
    dists, values = diffnet.forward(params, obs)
    err = values - np.asarray(returns, dtype=np.float64)
    return float(np.mean(err * err))


class PpoAgent:
    """Single-network PPO learner owning its parameters and Adam state."""

    kind = "ppo"

    def __init__(self, spec, cfg, seed):
        cfg.validate()
        self.spec = spec
        self.cfg = cfg
        self.params = diffnet.init_network(spec, seed)
        self.adam = diffnet.AdamState.zeros(diffnet.param_size(spec))
        self.beta = cfg.beta

    @property
    def policy_params(self):
        return self.params

    def _apply_step(self, grads):
        """Hook for subclasses that post-process the optimizer step."""
        return diffnet.adam_step(self.params, grads, self.adam, self.cfg.stepsize)

    def update(self, batch, rng):
        cfg = self.cfg
        old_dists, _ = diffnet.forward(self.params, batch.obs)
        old_means = old_dists.means
        old_log_std = old_dists.log_std
        saved_params = self.params.copy()
        saved_adam = self.adam.copy()
        clamp_counter = [0]
        pg_vals, vf_vals = [], []
        try:
            for _ in range(cfg.epochs):
                for idx in minibatches(batch.horizon, cfg.n_minibatches, rng):
                    def loss_fn(leaves, idx=idx):
                        loss, aux = build_ppo_loss(
                            leaves, self.spec, cfg, self.beta,
                            batch.obs[idx], batch.actions[idx],
                            batch.logp_old[idx], batch.advantages[idx],
                            batch.returns[idx], old_means[idx], old_log_std,
                            clamp_counter,
                        )
                        pg_vals.append(aux["pg"])
                        vf_vals.append(aux["vf"])
                        return loss

                    _, grads = diffnet.grad(self.params, loss_fn)
                    grads = diffnet.clip_grad_norm(grads, 0.5)
                    self.params, self.adam = self._apply_step(grads)
        except (ad.NumericFailure, ValueError) as exc:
            self.params = saved_params
            self.adam = saved_adam
            raise UpdateFailure(str(exc)) from exc

        kl_report = mean_kl_to_snapshot(self.params, batch.obs, old_means, old_log_std,
                                        "reverse")
        if cfg.variant == "adaptive_kl":
            measured = mean_kl_to_snapshot(self.params, batch.obs, old_means,
                                           old_log_std, cfg.kl_direction)
            self.beta = adaptive_beta(self.beta, measured, cfg.d_targ)
        return UpdateMetrics(
            pg_loss=float(np.mean(pg_vals)),
            vf_loss=float(np.mean(vf_vals)),
            kl_self_mean=kl_report,
            clamp_count=clamp_counter[0],
            beta=self.beta,
        )
