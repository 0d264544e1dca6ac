"""Experiment harness: training protocols, metrics, snapshots, tournaments.

Three protocols:

* ``single`` — one task, PPO-style updates until total_steps.
* ``alternating`` — the task pair (variant a/b) swaps every switch_period
  environment steps; the observation carries no task cue, so any retained
  skill must live in the parameters.
* ``selfplay`` — both sides of the sumoline game are driven by one shared
  controller; only player 1's experience trains it, with a dense-to-sparse
  reward curriculum early in the run.

Every run writes a resolved config, a metrics CSV, periodic snapshots and a
summary.json into its run directory. With ``timing = "none"`` (the default)
all outputs are byte-deterministic for a given config and seed.
"""

import json
import math
import os
import sys
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffnet
from . import snapshot as snap
from .cascade import CascadeAgent
from .config import config_hash, dump_resolved
from .envs import SumoLine, make_env
from .ppo import PpoAgent, UpdateFailure
from .rollout import (
    RolloutBatch,
    RunningNormalizer,
    collect,
    compute_gae,
    merge_batches,
)
from .synapse import default_chain, wrap_optimizer

CSV_BASE_COLUMNS = (
    "iteration", "env_steps", "task", "mean_ep_reward",
    "pg_loss", "vf_loss", "kl_self_mean", "beta", "wall_ms",
)


class WorkerNormalizer:
    """Per-worker view of a shared normalizer during parallel collection.

    Each worker normalizes against the shared statistics frozen at update
    start combined with its own accumulated deltas; after collection the
    deltas are folded back into the shared normalizer in worker order, so
    the result does not depend on interleaving.
    """

    def __init__(self, base):
        self.base = base
        self.delta = RunningNormalizer(base.mean.shape[0])

    def normalize(self, obs, update):
        if update:
            self.delta.update(np.asarray(obs, dtype=np.float64))
        combined = self.base.copy()
        combined.merge(self.delta)
        return combined.normalize(obs, update=False)


def make_agent(cfg, spec, seed):
    if cfg.agent == "pc":
        return CascadeAgent(spec, replace(cfg.cascade), seed)
    if cfg.agent == "synaptic":
        return SynapticAgent(spec, replace(cfg.ppo, variant="clipped"),
                             cfg.synapse, seed)
    return PpoAgent(spec, replace(cfg.ppo, variant=cfg.agent), seed)


class SynapticAgent(PpoAgent):
    """Clipped PPO whose every Adam step flows through a beaker chain.

    The chain's hidden beakers drag the visible weights back toward their
    long-run values, giving multi-timescale consolidation in parameter
    space rather than policy space.
    """

    kind = "synaptic"

    def __init__(self, spec, ppo_cfg, syn_cfg, seed):
        super().__init__(spec, ppo_cfg, seed)
        self.chain = default_chain(
            diffnet.param_size(spec), n_beakers=syn_cfg.n_beakers,
            g12=syn_cfg.g12, eta=syn_cfg.eta,
        )
        # all beakers start at the initial weights (chain at equilibrium)
        self.chain.u[:] = self.params.values[:, None]

    def update(self, batch, rng):
        saved_chain_u = self.chain.u.copy()
        try:
            return super().update(batch, rng)
        except UpdateFailure:
            self.chain.u = saved_chain_u
            raise

    def _apply_step(self, grads):
        new_params, new_adam = diffnet.adam_step(
            self.params, grads, self.adam, self.cfg.stepsize
        )
        raw_update = new_params.values - self.params.values
        self.chain, visible = wrap_optimizer(self.chain, raw_update)
        return self.params.replace_values(visible), new_adam


@dataclass
class MetricsRow:
    iteration: int
    env_steps: int
    task: str
    mean_ep_reward: float
    pg_loss: float
    vf_loss: float
    kl_self_mean: float
    beta: float
    wall_ms: float
    per_depth_kl: list = field(default_factory=list)


class MetricsWriter:
    """CSV writer with full-precision float formatting (repr round-trip)."""

    def __init__(self, path, n_depths=0):
        self.n_depths = n_depths
        self.fh = open(path, "w", encoding="utf-8", newline="\n")
        cols = list(CSV_BASE_COLUMNS)
        cols += [f"kl_depth_{k + 1}" for k in range(n_depths)]
        self.fh.write(",".join(cols) + "\n")

    @staticmethod
    def _fmt(x):
        return repr(float(x))

    def write(self, row):
        cells = [
            str(row.iteration), str(row.env_steps), row.task,
            self._fmt(row.mean_ep_reward), self._fmt(row.pg_loss),
            self._fmt(row.vf_loss), self._fmt(row.kl_self_mean),
            self._fmt(row.beta), self._fmt(row.wall_ms),
        ]
        depths = list(row.per_depth_kl) + [float("nan")] * self.n_depths
        cells += [self._fmt(v) for v in depths[: self.n_depths]]
        self.fh.write(",".join(cells) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def forgetting_metric(rows):
    """Average drop from a task's best previous block to its next return.

    Rows are (task, mean_ep_reward) in training order. For each contiguous
    block of a task after its first, the drop is the best block-mean among
    that task's earlier blocks minus the mean over the first 10% (at least
    one row) of the new block. Returns None when no task has two blocks.
    """
    blocks = []
    for task, reward in rows:
        if blocks and blocks[-1][0] == task:
            blocks[-1][1].append(reward)
        else:
            blocks.append((task, [reward]))
    block_means = {}
    drops = []
    for task, rewards in blocks:
        valid = [r for r in rewards if not math.isnan(r)]
        head_n = max(1, math.ceil(0.1 * len(rewards)))
        head = [r for r in rewards[:head_n] if not math.isnan(r)]
        prev = block_means.get(task)
        if prev and head:
            drops.append(max(prev) - float(np.mean(head)))
        if valid:
            block_means.setdefault(task, []).append(float(np.mean(valid)))
        else:
            block_means.setdefault(task, [])
    if not drops:
        return None
    return float(np.mean(drops))


def evaluate_policy(params, norm, env_name, n_episodes, rng, max_steps=None):
    """Mean return over deterministic (mean-action) episodes."""
    env = make_env(env_name, max_steps=max_steps)
    returns = []
    for _ in range(n_episodes):
        obs = env.reset(rng)
        total = 0.0
        while True:
            nobs = norm.normalize(obs, update=False)
            dists, _ = diffnet.forward(params, nobs[None, :])
            result = env.step(dists.means[0])
            total += result.reward
            if result.done:
                break
            obs = result.obs
        returns.append(total)
    return float(np.mean(returns))


# ---------------------------------------------------------------------------
# self-play
# ---------------------------------------------------------------------------

def _policy_action(params, norm, raw_obs, rng, update_norm):
    nobs = norm.normalize(raw_obs, update=update_norm)
    dists, vals = diffnet.forward(params, nobs[None, :])
    std = np.exp(dists.log_std)
    action = dists.means[0] + std * rng.standard_normal(dists.means.shape[1])
    logp = diffnet.gauss_logp_np(dists.means[0], dists.log_std, action)
    return nobs, action, float(logp), float(vals[0])


def collect_selfplay(env, params, horizon, norm, rng, alpha_fn, episode_counter):
    """Collect player 1's transitions while the same controller plays both sides.

    Only player 1's observations update the normalizer and only its
    transitions enter the batch; the training reward blends dense shaping
    and the sparse outcome with a weight alpha fixed at episode start.
    """
    obs_dim, act_dim = env.obs_dim, env.act_dim
    obs = np.empty((horizon, obs_dim))
    actions = np.empty((horizon, act_dim))
    logp_old = np.empty(horizon)
    rewards = np.empty(horizon)
    values = np.empty(horizon)
    dones = np.zeros(horizon, dtype=bool)
    episode_returns = []

    if env.needs_reset:
        env.reset(rng)
        env.alpha = alpha_fn(episode_counter[0])
        episode_counter[0] += 1
    ep_return = env.pending_return
    for t in range(horizon):
        nobs1, a1, logp1, v1 = _policy_action(
            params, norm, env.observe(0), rng, update_norm=True
        )
        _, a2, _, _ = _policy_action(
            params, norm, env.observe(1), rng, update_norm=False
        )
        r1, _ = env.step((a1, a2))

        alpha = env.alpha
        obs[t] = nobs1
        actions[t] = a1
        logp_old[t] = logp1
        rewards[t] = alpha * r1.reward_dense + (1.0 - alpha) * r1.reward
        values[t] = v1
        dones[t] = r1.done
        ep_return += r1.reward

        if r1.done:
            episode_returns.append(ep_return)
            ep_return = 0.0
            env.reset(rng)
            env.alpha = alpha_fn(episode_counter[0])
            episode_counter[0] += 1

    env.pending_return = ep_return
    final_nobs = norm.normalize(env.observe(0), update=False)
    _, boot = diffnet.forward(params, final_nobs[None, :])
    return RolloutBatch(
        obs=obs, actions=actions, logp_old=logp_old, rewards=rewards,
        values=values, dones=dones, bootstrap_value=float(boot[0]),
        episode_returns=episode_returns,
    )


def play_match_episode(params_a, norm_a, params_b, norm_b, rngs, max_steps):
    """One stochastic episode, a as player 1; returns a's score (1/0.5/0).

    rngs = (reset_rng, player-1 noise rng, player-2 noise rng). Keeping the
    action-noise streams attached to the player roles (not the parameters)
    lets evaluate_match replay identical randomness with the sides swapped.
    """
    reset_rng, rng_p1, rng_p2 = rngs
    env = SumoLine(max_steps=max_steps)
    env.reset(reset_rng)
    while True:
        def act(params, norm, player, rng):
            nobs = norm.normalize(env.observe(player), update=False)
            dists, _ = diffnet.forward(params, nobs[None, :])
            return dists.sample(rng)[0]

        r1, _ = env.step((act(params_a, norm_a, 0, rng_p1),
                          act(params_b, norm_b, 1, rng_p2)))
        if r1.done:
            return {"win": 1.0, "draw": 0.5, "loss": 0.0}[r1.outcome]


def _match_rngs(seed, pair):
    return tuple(
        np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(entropy=seed, spawn_key=(pair, role))))
        for role in range(3)
    )


def evaluate_match(params_a, norm_a, params_b, norm_b, n_episodes, seed,
                   max_steps=5000):
    """Mean score of a over side-alternating paired episodes.

    Each pair replays the same reset jitter and per-role action noise with
    the sides swapped, so the outcome is deterministic given the seed and a
    controller matched against itself scores exactly 0.5. An odd n_episodes
    is rounded up to keep the pairs whole.
    """
    n_pairs = (n_episodes + 1) // 2
    scores = []
    for pair in range(n_pairs):
        scores.append(play_match_episode(params_a, norm_a, params_b, norm_b,
                                         _match_rngs(seed, pair), max_steps))
        score_b = play_match_episode(params_b, norm_b, params_a, norm_a,
                                     _match_rngs(seed, pair), max_steps)
        scores.append(1.0 - score_b)
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# run driver
# ---------------------------------------------------------------------------

@dataclass
class _RunState:
    cfg: object
    out_dir: str
    agent: object
    norm: RunningNormalizer
    env_rngs: list
    update_rng: np.random.Generator
    eval_rng: np.random.Generator
    env_steps: int = 0
    snapshot_version: int = 0
    archive: list = field(default_factory=list)  # (version, env_steps, path)
    n_update_failures: int = 0


def _init_run(cfg, out_dir):
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "snapshots"), exist_ok=True)
    dump_resolved(cfg, os.path.join(out_dir, "config.json"))
    env = make_env(cfg.env_variants()[0], max_steps=cfg.max_episode_steps)
    spec = diffnet.NetworkSpec(obs_dim=env.obs_dim, act_dim=env.act_dim)
    agent = make_agent(cfg, spec, cfg.seed)
    root = np.random.SeedSequence(cfg.seed)
    children = root.spawn(cfg.n_envs + 2)
    env_rngs = [np.random.Generator(np.random.PCG64(ss))
                for ss in children[: cfg.n_envs]]
    update_rng = np.random.Generator(np.random.PCG64(children[cfg.n_envs]))
    eval_rng = np.random.Generator(np.random.PCG64(children[cfg.n_envs + 1]))
    return _RunState(
        cfg=cfg, out_dir=out_dir, agent=agent,
        norm=RunningNormalizer(env.obs_dim),
        env_rngs=env_rngs, update_rng=update_rng, eval_rng=eval_rng,
    )


def _save_snapshot(state, final=False):
    cfg = state.cfg
    arrays, counts = snap.agent_arrays(state.agent)
    meta = {
        "config_hash": config_hash(cfg),
        "env_steps": state.env_steps,
        "snapshot_version": state.snapshot_version,
        "normalizer": state.norm.state(),
        "counts": counts,
        "beta": getattr(state.agent, "beta", None),
        "rngs": {
            "envs": [snap.rng_state_meta(r) for r in state.env_rngs],
            "update": snap.rng_state_meta(state.update_rng),
            "eval": snap.rng_state_meta(state.eval_rng),
        },
        "final": final,
    }
    path = os.path.join(state.out_dir, "snapshots",
                        f"snap_{state.snapshot_version:06d}.bin")
    snap.write_snapshot(path, kind=state.agent.kind, spec=state.agent.policy_params.spec,
                        arrays=arrays, meta=meta)
    state.archive.append((state.snapshot_version, state.env_steps, path))
    state.snapshot_version += 1
    return path


def _collect_update_batch(state, envs, reward_fn=None, selfplay_state=None):
    """Collect one horizon per worker, fold normalizer deltas in worker order."""
    cfg = state.cfg
    if cfg.n_envs == 1:
        if selfplay_state is not None:
            batch = collect_selfplay(
                envs[0], state.agent.policy_params, cfg.horizon, state.norm,
                state.env_rngs[0], selfplay_state["alpha_fn"],
                selfplay_state["episode_counter"],
            )
        else:
            batch = collect(envs[0], state.agent.policy_params, cfg.horizon,
                            state.norm, state.env_rngs[0], reward_fn=reward_fn)
        return compute_gae(batch, cfg.gamma, cfg.lam, standardize=True)

    workers = [WorkerNormalizer(state.norm) for _ in range(cfg.n_envs)]
    batches = []
    for i, env in enumerate(envs):
        if selfplay_state is not None:
            b = collect_selfplay(
                env, state.agent.policy_params, cfg.horizon, workers[i],
                state.env_rngs[i], selfplay_state["alpha_fn"],
                selfplay_state["episode_counter"],
            )
        else:
            b = collect(env, state.agent.policy_params, cfg.horizon,
                        workers[i], state.env_rngs[i], reward_fn=reward_fn)
        batches.append(compute_gae(b, cfg.gamma, cfg.lam, standardize=False))
    for w in workers:
        state.norm.merge(w.delta)
    return merge_batches(batches)


def _nan_metrics():
    nan = float("nan")
    return nan, nan, nan


def _train_loop(state, envs_for_update, task_for_update, writer,
                selfplay_state=None):
    """Shared update loop over cfg.n_updates; returns (task, reward) rows."""
    cfg = state.cfg
    reward_rows = []
    for it in range(cfg.n_updates):
        t0 = time.perf_counter()
        envs = envs_for_update(it)
        task = task_for_update(it)
        batch = _collect_update_batch(state, envs, selfplay_state=selfplay_state)
        state.env_steps += cfg.steps_per_update
        try:
            metrics = state.agent.update(batch, state.update_rng)
            pg, vf, kl = metrics.pg_loss, metrics.vf_loss, metrics.kl_self_mean
            beta = metrics.beta
            per_depth = metrics.per_depth_kl
        except UpdateFailure as exc:
            print(f"update {it}: numeric failure, parameters restored: {exc}",
                  file=sys.stderr)
            state.n_update_failures += 1
            pg, vf, kl = _nan_metrics()
            beta = getattr(state.agent, "beta", float("nan"))
            per_depth = []
        mean_rew = (float(np.mean(batch.episode_returns))
                    if batch.episode_returns else float("nan"))
        wall_ms = ((time.perf_counter() - t0) * 1000.0
                   if cfg.timing == "wall" else 0.0)
        writer.write(MetricsRow(
            iteration=it, env_steps=state.env_steps, task=task,
            mean_ep_reward=mean_rew, pg_loss=pg, vf_loss=vf,
            kl_self_mean=kl, beta=beta, wall_ms=wall_ms,
            per_depth_kl=per_depth,
        ))
        reward_rows.append((task, mean_rew))
        if cfg.snapshot_every > 0 and (it + 1) % cfg.snapshot_every == 0:
            _save_snapshot(state)
    return reward_rows


def run_single(cfg, out_dir):
    state = _init_run(cfg, out_dir)
    envs = [make_env(cfg.env) for _ in range(cfg.n_envs)]
    n_depths = cfg.cascade.n_policies if cfg.agent == "pc" else 0
    writer = MetricsWriter(os.path.join(out_dir, "metrics.csv"), n_depths)
    try:
        _train_loop(state, lambda it: envs, lambda it: cfg.env, writer)
    finally:
        writer.close()
    _save_snapshot(state, final=True)
    final_eval = {
        cfg.env: evaluate_policy(state.agent.policy_params, state.norm, cfg.env,
                                 cfg.eval_episodes, state.eval_rng)
    }
    return _write_summary(state, final_eval=final_eval, forgetting=None)


def run_alternating(cfg, out_dir):
    state = _init_run(cfg, out_dir)
    variants = cfg.env_variants()
    switch_every = cfg.switch_every_updates
    holder = {"task": None, "envs": None}

    def envs_for(it):
        task = variants[(it // switch_every) % 2]
        if task != holder["task"]:
            holder["task"] = task
            holder["envs"] = [make_env(task) for _ in range(cfg.n_envs)]
        return holder["envs"]

    def task_for(it):
        return variants[(it // switch_every) % 2]

    n_depths = cfg.cascade.n_policies if cfg.agent == "pc" else 0
    writer = MetricsWriter(os.path.join(out_dir, "metrics.csv"), n_depths)
    try:
        rows = _train_loop(state, envs_for, task_for, writer)
    finally:
        writer.close()
    _save_snapshot(state, final=True)
    final_eval = {
        task: evaluate_policy(state.agent.policy_params, state.norm, task,
                              cfg.eval_episodes, state.eval_rng)
        for task in variants
    }
    return _write_summary(state, final_eval=final_eval,
                          forgetting=forgetting_metric(rows))


def run_selfplay(cfg, out_dir):
    state = _init_run(cfg, out_dir)
    envs = [make_env("sumoline", max_steps=cfg.max_episode_steps)
            for _ in range(cfg.n_envs)]
    planned = max(1, math.ceil(cfg.curriculum_frac * cfg.total_steps
                               / cfg.max_episode_steps))

    def alpha_fn(ep_idx):
        return max(0.0, 1.0 - ep_idx / planned)

    selfplay_state = {"alpha_fn": alpha_fn, "episode_counter": [0]}
    n_depths = cfg.cascade.n_policies if cfg.agent == "pc" else 0
    writer = MetricsWriter(os.path.join(out_dir, "metrics.csv"), n_depths)
    try:
        _train_loop(state, lambda it: envs, lambda it: "sumoline", writer,
                    selfplay_state=selfplay_state)
    finally:
        writer.close()
    _save_snapshot(state, final=True)
    tour_path = os.path.join(out_dir, "tournament.csv")
    table = tournament_vs_history(state.agent.policy_params, state.norm,
                                  state.archive[:-1], cfg, tour_path)
    mean_score = (float(np.mean([r["mean_score"] for r in table]))
                  if table else None)
    return _write_summary(state, final_eval={"mean_score_vs_history": mean_score},
                          forgetting=None, extra={"tournament_csv": tour_path})


def load_policy_from_snapshot(path):
    """(ParamVector of the visible policy, its archived normalizer, meta)."""
    meta, spec, arrays = snap.read_snapshot(path)
    params = diffnet.ParamVector(spec, arrays["net0"].copy())
    norm = RunningNormalizer.from_state(meta["normalizer"])
    return params, norm, meta


def tournament_vs_history(params, norm, archive, cfg, csv_path,
                          n_episodes=30):
    """Score the current controller against every archived snapshot."""
    rows = []
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("snapshot_version,env_steps,mean_score,n_episodes\n")
        for version, env_steps, path in archive:
            old_params, old_norm, _ = load_policy_from_snapshot(path)
            score = evaluate_match(
                params, norm, old_params, old_norm, n_episodes,
                seed=cfg.seed * 1000003 + version,
                max_steps=cfg.eval_max_episode_steps,
            )
            rows.append({"snapshot_version": version, "env_steps": env_steps,
                         "mean_score": score, "n_episodes": n_episodes})
            fh.write(f"{version},{env_steps},{repr(score)},{n_episodes}\n")
    return rows


def eval_hidden_depths(agent, norm, cfg, eval_rng):
    """Per-depth deterministic evaluation of a consolidation cascade.

    Single-agent protocols report each depth's mean return per task;
    self-play reports each depth's match score against the visible policy.
    """
    if agent.kind != "pc":
        raise ValueError("hidden-depth evaluation requires a pc agent")
    st = agent.state
    out = []
    for k, net in enumerate(st.nets):
        if cfg.protocol == "selfplay":
            score = evaluate_match(
                net, norm, st.nets[0], norm, cfg.eval_episodes,
                seed=cfg.seed * 7919 + k, max_steps=cfg.eval_max_episode_steps,
            )
            out.append({"depth": k + 1, "score_vs_visible": score})
        else:
            entry = {"depth": k + 1}
            for task in cfg.env_variants():
                entry[task] = evaluate_policy(net, norm, task,
                                              cfg.eval_episodes, eval_rng)
            out.append(entry)
    return out


def _write_summary(state, final_eval, forgetting, extra=None):
    cfg = state.cfg
    summary = {
        "run_id": config_hash(cfg),
        "protocol": cfg.protocol,
        "agent": cfg.agent,
        "env": cfg.env,
        "seed": cfg.seed,
        "env_steps": state.env_steps,
        "n_updates": cfg.n_updates,
        "n_update_failures": state.n_update_failures,
        "n_snapshots": state.snapshot_version,
        "final_eval": final_eval,
        "forgetting": forgetting,
    }
    if extra:
        summary.update(extra)
    with open(os.path.join(state.out_dir, "summary.json"), "w",
              encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def run_experiment(cfg, out_dir):
    runners = {"single": run_single, "alternating": run_alternating,
               "selfplay": run_selfplay}
    return runners[cfg.protocol](cfg, out_dir)
