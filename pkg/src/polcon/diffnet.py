"""MLP policy/value network on flat parameter vectors.

A network is a 64-64 ReLU torso with a diagonal-Gaussian policy head
(state-independent log-std vector) and a scalar value head sharing the
torso. Parameters live in one flat float64 vector with a named layout,
which keeps snapshots, Adam and gradient clipping trivial.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .kernels import adam_kernel

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class NetworkSpec:
    obs_dim: int
    act_dim: int
    hidden_widths: tuple = (64, 64)
    activation: str = "relu"

    def __post_init__(self):
        if self.obs_dim < 1 or self.act_dim < 1:
            raise ValueError("obs_dim and act_dim must be >= 1")
        if not self.hidden_widths:
            raise ValueError("hidden_widths must be non-empty")
        if any(h < 1 for h in self.hidden_widths):
            raise ValueError("zero-width hidden layer")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "hidden_widths", tuple(self.hidden_widths))


@lru_cache(maxsize=None)
def layout_for(spec):
    """Ordered (name, shape) pairs covering the whole parameter vector."""
    entries = []
    fan_in = spec.obs_dim
    for i, width in enumerate(spec.hidden_widths):
        entries.append((f"w{i}", (fan_in, width)))
        entries.append((f"b{i}", (width,)))
        fan_in = width
    entries.append(("w_mean", (fan_in, spec.act_dim)))
    entries.append(("b_mean", (spec.act_dim,)))
    entries.append(("log_std", (spec.act_dim,)))
    entries.append(("w_value", (fan_in, 1)))
    entries.append(("b_value", (1,)))
    return tuple(entries)


@lru_cache(maxsize=None)
def param_size(spec):
    return sum(int(np.prod(shape)) for _, shape in layout_for(spec))


@lru_cache(maxsize=None)
def _slices_for(spec):
    slices = {}
    offset = 0
    for name, shape in layout_for(spec):
        n = int(np.prod(shape))
        slices[name] = (offset, offset + n, shape)
        offset += n
    return slices


class ParamVector:
    """Flat float64 parameter storage plus the named layout."""

    __slots__ = ("spec", "values", "_slices")

    def __init__(self, spec, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (param_size(spec),):
            raise ValueError(
                f"expected {param_size(spec)} values, got {values.shape}"
            )
        self.spec = spec
        self.values = values
        self._slices = _slices_for(spec)

    def __getitem__(self, name):
        start, stop, shape = self._slices[name]
        return self.values[start:stop].reshape(shape)

    def copy(self):
        return ParamVector(self.spec, self.values.copy())

    def replace_values(self, values):
        return ParamVector(self.spec, values)

    @property
    def layout(self):
        return dict(self._slices)


@dataclass
class GaussDist:
    """Single-state diagonal Gaussian over actions."""

    mean: np.ndarray
    log_std: np.ndarray


@dataclass
class GaussBatch:
    """Batch of diagonal Gaussians sharing one state-independent log-std."""

    means: np.ndarray  # (B, act_dim)
    log_std: np.ndarray  # (act_dim,)

    def __len__(self):
        return self.means.shape[0]

    def __getitem__(self, i):
        return GaussDist(self.means[i], self.log_std)

    def sample(self, rng):
        std = np.exp(self.log_std)
        return self.means + std * rng.standard_normal(self.means.shape)

    def log_prob(self, actions):
        return gauss_logp_np(self.means, self.log_std, actions)


_LOG_2PI = np.log(2.0 * np.pi)


def gauss_logp_np(means, log_std, actions):
    z = (actions - means) * np.exp(-log_std)
    dim = actions.shape[-1]
    return -0.5 * (z * z).sum(axis=-1) - log_std.sum(axis=-1) - 0.5 * dim * _LOG_2PI


def gauss_kl_np(p_means, p_log_std, q_means, q_log_std):
    diff = p_means - q_means
    e2p = np.exp(2.0 * p_log_std)
    inv_2q = np.exp(-2.0 * q_log_std)
    per_dim = q_log_std - p_log_std + (e2p + diff * diff) * (0.5 * inv_2q) - 0.5
    return per_dim.sum(axis=-1)


def log_prob(dist, action):
    """Log density of `action` under a single GaussDist."""
    action = np.asarray(action, dtype=np.float64)
    if action.shape != dist.mean.shape:
        raise ValueError("action dimension mismatch")
    return float(gauss_logp_np(dist.mean, dist.log_std, action))


def kl_divergence(p, q):
    """Closed-form KL(p || q) between diagonal Gaussians."""
    if p.mean.shape != q.mean.shape:
        raise ValueError("distribution dimension mismatch")
    return float(gauss_kl_np(p.mean, p.log_std, q.mean, q.log_std))


def entropy(dist):
    dim = dist.log_std.shape[-1]
    return float(dist.log_std.sum() + 0.5 * dim * (1.0 + _LOG_2PI))


def _orthogonal(rng, shape, gain):
    a = rng.standard_normal(shape)
    flat = a.reshape(shape[0], -1)
    if flat.shape[0] < flat.shape[1]:
        flat = flat.T
    q, r = np.linalg.qr(flat)
    q = q * np.where(np.diag(r) >= 0.0, 1.0, -1.0)
    if flat.shape != a.reshape(shape[0], -1).shape:
        q = q.T
    return gain * q.reshape(shape)


def init_network(spec, seed):
    """Seeded orthogonal initialization; log-std starts at 0."""
    rng = np.random.Generator(np.random.PCG64(seed))
    values = np.zeros(param_size(spec))
    pv = ParamVector(spec, values)
    n_hidden = len(spec.hidden_widths)
    for i in range(n_hidden):
        pv[f"w{i}"][...] = _orthogonal(rng, pv[f"w{i}"].shape, np.sqrt(2.0))
    pv["w_mean"][...] = _orthogonal(rng, pv["w_mean"].shape, 0.01)
    pv["w_value"][...] = _orthogonal(rng, pv["w_value"].shape, 1.0)
    # biases and log_std stay zero
    return pv


def forward(params, obs):
    """Batch forward pass. Returns (GaussBatch, values (B,))."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim == 1:
        obs = obs[None, :]
    if not np.all(np.isfinite(obs)):
        raise ValueError("non-finite observation")
    x = obs
    for i in range(len(params.spec.hidden_widths)):
        x = x @ params[f"w{i}"] + params[f"b{i}"]
        x = np.maximum(x, 0.0)
    means = x @ params["w_mean"] + params["b_mean"]
    values = (x @ params["w_value"] + params["b_value"])[:, 0]
    log_std = np.clip(params["log_std"], LOG_STD_MIN, LOG_STD_MAX)
    return GaussBatch(means, log_std), values


def leaves_from(params):
    """Tape leaf Tensors for every layout entry of one network."""
    return {name: ad.Tensor(params[name]) for name, _ in layout_for(params.spec)}


def stacked_leaves(nets):
    """Tape leaf Tensors stacking N same-spec networks along axis 0."""
    spec = nets[0].spec
    return {
        name: ad.Tensor(np.stack([net[name] for net in nets]))
        for name, _ in layout_for(spec)
    }


def tape_forward(leaves, spec, obs):
    """Torso + policy head on the tape.

    Returns (means, log_std, last_hidden) Tensors. With stacked leaves the
    shapes carry a leading N axis; slice k is bit-identical to the
    unstacked forward of network k.
    """
    x = ad.constant(obs)
    for i in range(len(spec.hidden_widths)):
        x = ad.relu(ad.affine(x, leaves[f"w{i}"], leaves[f"b{i}"]))
    means = ad.affine(x, leaves["w_mean"], leaves["b_mean"])
    log_std = ad.clip(leaves["log_std"], LOG_STD_MIN, LOG_STD_MAX)
    return means, log_std, x


def flatten_grads(leaves, spec):
    """Collect leaf gradients into one flat vector in layout order."""
    parts = []
    for name, shape in layout_for(spec):
        g = leaves[name].grad
        if g is None:
            g = np.zeros(shape)
        parts.append(np.asarray(g).ravel())
    return np.concatenate(parts)


def grad(params, loss_fn):
    """Evaluate loss_fn over tape leaves of `params` and backpropagate.

    loss_fn receives a dict of leaf Tensors and returns a scalar Tensor.
    Returns (loss value, flat gradient vector).
    """
    leaves = leaves_from(params)
    loss = loss_fn(leaves)
    ad.backward(loss)
    return float(loss.data), flatten_grads(leaves, params.spec)


def clip_grad_norm(grads, max_norm=0.5):
    """Rescale so the global L2 norm does not exceed max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = np.sqrt(np.sum(grads * grads))
    if norm <= max_norm:
        return grads
    return grads * (max_norm / norm)


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)

    def copy(self):
        return AdamState(self.first_moment.copy(), self.second_moment.copy(), self.step_count)


def adam_step(params, grads, state, stepsize):
    """Bias-corrected Adam update; returns new (ParamVector, AdamState)."""
    if stepsize <= 0:
        raise ValueError("stepsize must be positive")
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.values.shape:
        raise ValueError("gradient/parameter layout mismatch")
    if not np.all(np.isfinite(grads)):
        raise ValueError("non-finite gradient rejected")
    step = state.step_count + 1
    bc1 = 1.0 - ADAM_BETA1 ** step
    bc2 = 1.0 - ADAM_BETA2 ** step
    new_values, m, v = adam_kernel(
        params.values, grads, state.first_moment, state.second_moment,
        bc1, bc2, stepsize, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
    )
    return params.replace_values(new_values), AdamState(m, v, step)
