"""Deterministic toy continuous-control environments.

Two paired single-agent tasks (goal flip, action-gain flip) whose variant
is hidden from the observation, so the policy itself must encode the task,
and a 1-D two-body pushing game for self-play. All dynamics constants are
fixed in code; stable test baselines matter more than flexibility here.
"""

from dataclasses import dataclass

import numpy as np

DAMPING = 0.9
GAIN = 0.1
RESET_JITTER = 0.05
POINT_BOUND = 1.5  # keeps |dense reward| <= 3 given goals at +-0.8

SUMO_RADIUS = 0.05
SUMO_LOSS_BOUND = 1.0
SUMO_ARENA = 1.2
SUMO_WIN_REWARD = 2000.0
SUMO_CONTACT_BONUS = 0.5


class EnvContractError(RuntimeError):
    """step() called on a finished episode."""


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    done: bool
    outcome: str = "none"  # self-play only: none/win/loss/draw
    reward_dense: float = 0.0


def _check_action(action, dim):
    action = np.asarray(action, dtype=np.float64).reshape(dim)
    if not np.all(np.isfinite(action)):
        raise ValueError("non-finite action")
    return np.clip(action, -1.0, 1.0)


class _BaseEnv:
    def __init__(self):
        self.needs_reset = True
        self.pending_return = 0.0
        self._obs = None

    def current_obs(self):
        return self._obs

    def _post_reset(self, obs):
        self.needs_reset = False
        self.pending_return = 0.0
        self._obs = obs
        return obs

    def _guard(self):
        if self.needs_reset:
            raise EnvContractError("step() after episode end")


class PointGoal(_BaseEnv):
    """Point mass seeking a hidden goal at (+0.8, 0) [variant a] or (-0.8, 0) [b]."""

    obs_dim = 4
    act_dim = 2
    max_steps = 200

    def __init__(self, variant):
        super().__init__()
        if variant not in ("a", "b"):
            raise ValueError(f"unknown variant {variant!r}")
        self.variant = variant
        self.goal = np.array([0.8, 0.0]) if variant == "a" else np.array([-0.8, 0.0])
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)
        self.step_count = 0

    def reset(self, rng):
        self.pos = rng.uniform(-RESET_JITTER, RESET_JITTER, size=2)
        self.vel = np.zeros(2)
        self.step_count = 0
        return self._post_reset(self._observe())

    def _observe(self):
        return np.concatenate([self.pos, self.vel])

    def _force(self, action):
        return action

    def step(self, action):
        self._guard()
        action = _check_action(action, 2)
        force = self._force(action)
        self.vel = DAMPING * self.vel + GAIN * force
        self.pos = np.clip(self.pos + GAIN * self.vel, -POINT_BOUND, POINT_BOUND)
        self.step_count += 1
        reward = -float(np.linalg.norm(self.pos - self.goal)) - 0.1 * float(action @ action)
        done = self.step_count >= self.max_steps
        if done:
            self.needs_reset = True
        obs = self._observe()
        self._obs = obs
        return StepResult(obs=obs, reward=reward, done=done)


class PointDyn(PointGoal):
    """Same goal (+0.8, 0) in both variants; variant b inverts the action gain."""

    def __init__(self, variant):
        super().__init__("a")
        if variant not in ("a", "b"):
            raise ValueError(f"unknown variant {variant!r}")
        self.variant = variant
        self.gain_sign = 1.0 if variant == "a" else -1.0

    def _force(self, action):
        return self.gain_sign * action


class SumoLine(_BaseEnv):
    """Two unit masses pushing on the segment [-1.2, 1.2].

    Player 1 starts at -0.5, player 2 at +0.5. Each observes
    [x_self, v_self, x_opp, v_opp] in its own frame (player 2's frame is
    mirrored), and positive action pushes toward the opponent, so one
    controller can play both sides symmetrically. An agent past
    |x| > 1.0 loses. Sparse terminal rewards +2000 win / -2000 loss /
    -2000 each on a draw at max_steps; dense shaping is
    -|x_self| + 0.5 * [in contact].
    """

    obs_dim = 4
    act_dim = 1

    def __init__(self, max_steps=500):
        super().__init__()
        self.max_steps = max_steps
        self.x = np.array([-0.5, 0.5])
        self.v = np.zeros(2)
        self.step_count = 0

    def reset(self, rng):
        self.x = np.array([-0.5, 0.5]) + rng.uniform(-RESET_JITTER, RESET_JITTER, size=2)
        self.v = np.zeros(2)
        self.step_count = 0
        return self._post_reset(self.observe(0))

    def observe(self, player):
        s = 1.0 if player == 0 else -1.0
        me, opp = (0, 1) if player == 0 else (1, 0)
        return np.array([s * self.x[me], s * self.v[me], s * self.x[opp], s * self.v[opp]])

    def in_contact(self):
        return (self.x[1] - self.x[0]) <= 2.0 * SUMO_RADIUS + 1e-12

    def step(self, actions):
        """Advance both players; returns a pair of StepResults."""
        self._guard()
        a0 = _check_action(actions[0], 1)[0]
        a1 = _check_action(actions[1], 1)[0]
        # positive action pushes toward the opponent in each player's frame
        force = np.array([a0, -a1])
        self.v = DAMPING * self.v + GAIN * force
        self.x = self.x + GAIN * self.v
        if self.x[1] - self.x[0] < 2.0 * SUMO_RADIUS:
            # inelastic contact: shared velocity, bodies kept tangent
            center = 0.5 * (self.x[0] + self.x[1])
            self.x = np.array([center - SUMO_RADIUS, center + SUMO_RADIUS])
            shared = 0.5 * (self.v[0] + self.v[1])
            self.v = np.array([shared, shared])
        self.x = np.clip(self.x, -SUMO_ARENA, SUMO_ARENA)
        self.step_count += 1

        out = [np.abs(self.x[0]) > SUMO_LOSS_BOUND, np.abs(self.x[1]) > SUMO_LOSS_BOUND]
        outcomes = ["none", "none"]
        sparse = [0.0, 0.0]
        done = False
        if out[0] or out[1]:
            done = True
            if out[0] and out[1]:
                outcomes = ["draw", "draw"]
                sparse = [-SUMO_WIN_REWARD, -SUMO_WIN_REWARD]
            elif out[0]:
                outcomes = ["loss", "win"]
                sparse = [-SUMO_WIN_REWARD, SUMO_WIN_REWARD]
            else:
                outcomes = ["win", "loss"]
                sparse = [SUMO_WIN_REWARD, -SUMO_WIN_REWARD]
        elif self.step_count >= self.max_steps:
            done = True
            outcomes = ["draw", "draw"]
            sparse = [-SUMO_WIN_REWARD, -SUMO_WIN_REWARD]
        if done:
            self.needs_reset = True

        contact = SUMO_CONTACT_BONUS if self.in_contact() else 0.0
        results = []
        for player in range(2):
            dense = -abs(float(self.x[player])) + contact
            results.append(
                StepResult(
                    obs=self.observe(player),
                    reward=sparse[player],
                    done=done,
                    outcome=outcomes[player],
                    reward_dense=dense,
                )
            )
        self._obs = results[0].obs
        return tuple(results)


ENV_NAMES = ("pointgoal-a", "pointgoal-b", "pointdyn-a", "pointdyn-b", "sumoline")


def make_env(name, max_steps=None):
    if name.startswith("pointgoal-"):
        return PointGoal(name.split("-", 1)[1])
    if name.startswith("pointdyn-"):
        return PointDyn(name.split("-", 1)[1])
    if name == "sumoline":
        return SumoLine(max_steps=max_steps or 500)
    raise ValueError(f"unknown environment {name!r}")
