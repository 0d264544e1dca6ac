"""Policy consolidation: a chain of KL-coupled policies at exponentially
spaced timescales.

The visible policy (index 0) is trained by the PPO policy gradient; every
policy k is held near its own iteration-start snapshot with weight
beta * omega**k and near the snapshots of its chain neighbours. Deeper
policies also take proportionally smaller Adam steps (omega**-k), so depth
k moves omega times slower than depth k-1 in policy space.

All N networks are updated from one joint backward pass over stacked
parameters; the stacked ops run each network's GEMMs independently, so a
cascade with zeroed coupling weights reproduces the fixed-KL PPO baseline
bit for bit on the visible network.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import diffnet
from .ppo import (
    UpdateFailure,
    UpdateMetrics,
    pg_objective,
    kl_tensor,
    value_objective,
    mean_kl_to_snapshot,
)
from .rollout import minibatches

DIRECTION_COMBOS = ("reverse_reverse", "reverse_forward", "forward_reverse", "forward_forward")


@dataclass
class CascadeConfig:
    n_policies: int = 8  # 1 visible + 7 hidden
    beta: float = 0.5
    omega: float = 4.0
    omega12: float = 1.0
    base_stepsize: float = 3e-4
    kl_direction_self: str = "reverse"
    cascade_directions: str = "reverse_reverse"  # (toward-shallower, toward-deeper)
    boundary: str = "snapshot"  # deepest policy's downstream anchor: snapshot | live
    coupling_scale: float = 1.0  # 0 decouples the chain (diagnostics/tests)
    vf_coeff: float = 0.5
    entropy_coeff: float = 0.0
    epochs: int = 10
    n_minibatches: int = 64

    def validate(self):
        if self.n_policies < 2:
            raise ValueError("n_policies must be >= 2")
        if self.omega <= 1.0:
            raise ValueError("omega must exceed 1")
        if self.beta <= 0 or self.base_stepsize <= 0:
            raise ValueError("beta and base_stepsize must be positive")
        if self.omega12 < 0 or self.coupling_scale < 0:
            raise ValueError("omega12 and coupling_scale must be non-negative")
        if self.kl_direction_self not in ("forward", "reverse"):
            raise ValueError(f"unknown kl_direction_self {self.kl_direction_self!r}")
        if self.cascade_directions not in DIRECTION_COMBOS:
            raise ValueError(f"unknown cascade_directions {self.cascade_directions!r}")
        if self.boundary not in ("snapshot", "live"):
            raise ValueError(f"unknown boundary {self.boundary!r}")
        return self


def beta_k(cfg, k):
    """Self-constraint weight of depth k (1-based): beta * omega**(k-1)."""
    if not 1 <= k <= cfg.n_policies:
        raise ValueError(f"depth {k} out of range 1..{cfg.n_policies}")
    return cfg.beta * cfg.omega ** (k - 1)


def stepsize_k(cfg, k):
    """Adam stepsize of depth k (1-based): omega**(1-k) * base."""
    if not 1 <= k <= cfg.n_policies:
        raise ValueError(f"depth {k} out of range 1..{cfg.n_policies}")
    return cfg.omega ** (1 - k) * cfg.base_stepsize


def self_weights(cfg):
    return cfg.beta * cfg.omega ** np.arange(cfg.n_policies, dtype=np.float64)


def _chain_weights(cfg):
    """Weight vectors and old-snapshot neighbour indices for the chain terms."""
    n = cfg.n_policies
    up_w = np.full(n, cfg.omega)
    up_w[0] = 0.0
    up_idx = np.maximum(np.arange(n) - 1, 0)
    down_w = np.ones(n)
    down_w[0] = cfg.omega12
    down_idx = np.minimum(np.arange(n) + 1, n - 1)
    if cfg.boundary == "live":
        # KL of the deepest policy to its live self is identically zero
        down_w[n - 1] = 0.0
    up_w *= cfg.coupling_scale
    down_w *= cfg.coupling_scale
    return up_w, up_idx, down_w, down_idx


@dataclass
class CascadeState:
    spec: object
    cfg: CascadeConfig
    nets: list  # N ParamVectors, index 0 = visible
    adam_states: list


def init_cascade(visible, cfg):
    """All policies start as exact copies of the visible network."""
    cfg.validate()
    nets = [visible.copy() for _ in range(cfg.n_policies)]
    adams = [diffnet.AdamState.zeros(diffnet.param_size(visible.spec))
             for _ in range(cfg.n_policies)]
    return CascadeState(spec=visible.spec, cfg=cfg, nets=nets, adam_states=adams)


def snapshot_old(state, obs):
    """Frozen per-state dists of all N networks: (means (N,B,A), log_stds (N,A))."""
    means, log_stds = [], []
    for net in state.nets:
        dists, _ = diffnet.forward(net, obs)
        means.append(dists.means)
        log_stds.append(dists.log_std)
    return np.stack(means), np.stack(log_stds)


def _chain_kl(mean_st, log_std_mid, old_means, old_log_stds, idx, direction):
    old_m = old_means[idx]
    old_ls = old_log_stds[idx][:, None, :]
    if direction == "reverse":  # KL(pi_k || neighbour_old)
        return ad.gauss_kl(mean_st, log_std_mid, old_m, old_ls)
    return ad.gauss_kl(old_m, old_ls, mean_st, log_std_mid)


def build_pc_loss(leaves, state, obs, actions, logp_old, advantages, returns,
                  old_means, old_log_stds, clamp_counter=None):
    """Joint descent loss over all N stacked networks for one minibatch."""
    cfg = state.cfg
    mean_st, log_std_st, hidden_st = diffnet.tape_forward(leaves, state.spec, obs)
    mean1 = ad.getitem(mean_st, 0)
    log_std1 = ad.getitem(log_std_st, 0)
    hidden1 = ad.getitem(hidden_st, 0)

    pg = pg_objective(mean1, log_std1, actions, logp_old, advantages, clamp_counter)
    log_std_mid = ad.unsqueeze(log_std_st, 1)  # (N, 1, A) against (N, B, A) means

    if cfg.kl_direction_self == "reverse":
        kl_self = ad.gauss_kl(mean_st, log_std_mid, old_means,
                              old_log_stds[:, None, :])
    else:
        kl_self = ad.gauss_kl(old_means, old_log_stds[:, None, :],
                              mean_st, log_std_mid)
    self_term = ad.asum(ad.scale(ad.amean(kl_self, axis=1), self_weights(cfg)))

    up_dir, down_dir = cfg.cascade_directions.split("_")
    up_w, up_idx, down_w, down_idx = _chain_weights(cfg)
    kl_up = _chain_kl(mean_st, log_std_mid, old_means, old_log_stds, up_idx, up_dir)
    kl_down = _chain_kl(mean_st, log_std_mid, old_means, old_log_stds, down_idx, down_dir)
    up_term = ad.asum(ad.scale(ad.amean(kl_up, axis=1), up_w))
    down_term = ad.asum(ad.scale(ad.amean(kl_down, axis=1), down_w))

    loss = ad.add(ad.neg(pg), self_term)
    loss = ad.add(loss, up_term)
    loss = ad.add(loss, down_term)
    vloss = value_objective(hidden1, ad.getitem(leaves["w_value"], 0),
                            ad.getitem(leaves["b_value"], 0), returns)
    loss = ad.add(loss, ad.scale(vloss, cfg.vf_coeff))
    if cfg.entropy_coeff > 0.0:
        ent = ad.gauss_entropy(log_std1)
        loss = ad.add(loss, ad.scale(ent, -cfg.entropy_coeff))
    aux = {"pg": float(pg.data), "vf": float(vloss.data)}
    return loss, aux


def pc_loss(state, obs, actions, logp_old, advantages, returns,
            old_means, old_log_stds):
    """Scalar value of the joint consolidation loss (descent sign)."""
    leaves = diffnet.stacked_leaves(state.nets)
    loss, _ = build_pc_loss(leaves, state, obs, actions, logp_old, advantages,
                            returns, old_means, old_log_stds)
    return float(loss.data)


def pc_grads(state, obs, actions, logp_old, advantages, returns,
             old_means, old_log_stds, clamp_counter=None):
    """Joint backward pass; returns (loss, aux, per-net flat gradients)."""
    leaves = diffnet.stacked_leaves(state.nets)
    loss, aux = build_pc_loss(leaves, state, obs, actions, logp_old, advantages,
                              returns, old_means, old_log_stds, clamp_counter)
    ad.backward(loss)
    layout = diffnet.layout_for(state.spec)
    n = state.cfg.n_policies
    per_net = []
    for k in range(n):
        parts = []
        for name, shape in layout:
            g = leaves[name].grad
            parts.append((np.zeros(shape) if g is None else g[k]).ravel())
        per_net.append(np.concatenate(parts))
    return float(loss.data), aux, per_net


def pc_update(state, batch, rng):
    """One consolidation update: epochs x minibatches of joint descent."""
    cfg = state.cfg
    old_means, old_log_stds = snapshot_old(state, batch.obs)
    saved_nets = [net.copy() for net in state.nets]
    saved_adams = [a.copy() for a in state.adam_states]
    clamp_counter = [0]
    pg_vals, vf_vals = [], []
    try:
        for _ in range(cfg.epochs):
            for idx in minibatches(batch.horizon, cfg.n_minibatches, rng):
                _, aux, grads = pc_grads(
                    state, batch.obs[idx], batch.actions[idx],
                    batch.logp_old[idx], batch.advantages[idx],
                    batch.returns[idx], old_means[:, idx], old_log_stds,
                    clamp_counter,
                )
                pg_vals.append(aux["pg"])
                vf_vals.append(aux["vf"])
                for k in range(cfg.n_policies):
                    g = diffnet.clip_grad_norm(grads[k], 0.5)
                    state.nets[k], state.adam_states[k] = diffnet.adam_step(
                        state.nets[k], g, state.adam_states[k], stepsize_k(cfg, k + 1)
                    )
    except (ad.NumericFailure, ValueError) as exc:
        state.nets = saved_nets
        state.adam_states = saved_adams
        raise UpdateFailure(str(exc)) from exc

    per_depth = [
        mean_kl_to_snapshot(state.nets[k], batch.obs, old_means[k], old_log_stds[k],
                            "reverse")
        for k in range(cfg.n_policies)
    ]
    return UpdateMetrics(
        pg_loss=float(np.mean(pg_vals)),
        vf_loss=float(np.mean(vf_vals)),
        kl_self_mean=per_depth[0],
        clamp_count=clamp_counter[0],
        beta=cfg.beta,
        per_depth_kl=per_depth,
    )


def act_with_depth(state, k, obs, deterministic=False, rng=None):
    """Action from the depth-k policy (1-based); mean action if deterministic."""
    if not 1 <= k <= state.cfg.n_policies:
        raise ValueError(f"depth {k} out of range 1..{state.cfg.n_policies}")
    dists, _ = diffnet.forward(state.nets[k - 1], np.asarray(obs)[None, :])
    if deterministic:
        return dists.means[0]
    if rng is None:
        raise ValueError("rng required for stochastic actions")
    return dists.sample(rng)[0]


def ablation_grid(cfg):
    """Cascade length ablation (preserving beta_N) plus omega reduction."""
    beta_n = beta_k(cfg, cfg.n_policies)
    grid = [replace(cfg)]
    for n in (4, 2):
        omega = (beta_n / cfg.beta) ** (1.0 / (n - 1))
        grid.append(replace(cfg, n_policies=n, omega=omega))
    for omega in (2.0, np.sqrt(2.0)):
        grid.append(replace(cfg, omega=omega))
    return grid


class CascadeAgent:
    """Harness-facing wrapper around CascadeState."""

    kind = "pc"

    def __init__(self, spec, cfg, seed):
        cfg.validate()
        visible = diffnet.init_network(spec, seed)
        self.state = init_cascade(visible, cfg)
        self.cfg = cfg
        self.spec = spec

    @property
    def policy_params(self):
        return self.state.nets[0]

    def update(self, batch, rng):
        return pc_update(self.state, batch, rng)
