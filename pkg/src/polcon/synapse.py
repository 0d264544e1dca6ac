"""Benna-Fusi beaker chains: per-parameter multi-timescale consolidation.

Each parameter owns a chain of hidden variables u_1..u_N ("beakers") with
widths C_k and tube conductances g_{k,k+1}; u_1 is the visible weight. The
Euler step of the liquid-flow dynamics is exactly a gradient step on the
quadratic penalty 0.5 * sum_k g_{k,k+1} ||U_k - U_{k+1}||^2 with learning
rate eta / C_k, which is what `consolidation_grad` exposes.
"""

from dataclasses import dataclass

import numpy as np

from .kernels import beaker_kernel


@dataclass
class BeakerChain:
    u: np.ndarray  # (P, N) hidden variables; u[:, 0] is the visible weight
    widths: np.ndarray  # (N,) beaker widths C_k, positive non-decreasing
    conductances: np.ndarray  # (N-1,) tube widths g_{k,k+1}, positive non-increasing
    eta: float

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.widths = np.asarray(self.widths, dtype=np.float64)
        self.conductances = np.asarray(self.conductances, dtype=np.float64)
        n = self.u.shape[1]
        if self.widths.shape != (n,) or self.conductances.shape != (n - 1,):
            raise ValueError("width/conductance shapes do not match chain length")
        if np.any(self.widths <= 0) or np.any(np.diff(self.widths) < 0):
            raise ValueError("widths must be positive and non-decreasing")
        # zero conductance is allowed (fully decoupled beakers)
        if n > 1 and (np.any(self.conductances < 0) or np.any(np.diff(self.conductances) > 0)):
            raise ValueError("conductances must be non-negative and non-increasing")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if not np.all(np.isfinite(self.u)):
            raise ValueError("non-finite beaker state")
        _check_stability(self.widths, self.conductances, self.eta)

    @property
    def visible(self):
        return self.u[:, 0]


def _flow_operator(widths, conductances):
    """diag(eta/C) @ graph Laplacian of the chain (the linear relaxation map)."""
    n = widths.shape[0]
    lap = np.zeros((n, n))
    for k in range(n - 1):
        g = conductances[k]
        lap[k, k] += g
        lap[k + 1, k + 1] += g
        lap[k, k + 1] -= g
        lap[k + 1, k] -= g
    return lap / widths[:, None]


def _check_stability(widths, conductances, eta):
    """Reject Euler steps whose linear map has spectral radius >= 1."""
    if widths.shape[0] < 2:
        return
    op = _flow_operator(widths, conductances)
    eigs = np.linalg.eigvals(np.eye(widths.shape[0]) - eta * op)
    radius = np.max(np.abs(eigs))
    if radius >= 1.0 + 1e-12:
        raise ValueError(
            f"unstable Euler step: spectral radius {radius:.6f} >= 1 "
            f"(reduce eta or g)"
        )


def default_chain(n_params, n_beakers=8, g12=0.01, eta=1.0):
    """Factor-2 width/conductance schedules; values are artifact defaults,
    the original synaptic model gives no ratios for the RL setting."""
    widths = 2.0 ** np.arange(n_beakers)
    conductances = g12 * 2.0 ** -np.arange(n_beakers - 1)
    return BeakerChain(
        u=np.zeros((n_params, n_beakers)),
        widths=widths,
        conductances=conductances,
        eta=eta,
    )


def beaker_step(chain, delta_w):
    """One Euler step; all beakers update from the pre-step values."""
    delta_w = np.asarray(delta_w, dtype=np.float64)
    if delta_w.shape != (chain.u.shape[0],):
        raise ValueError("delta_w length mismatch")
    if not np.all(np.isfinite(delta_w)):
        raise ValueError("non-finite delta_w")
    u = beaker_kernel(chain.u, chain.widths, chain.conductances, chain.eta, delta_w)
    return BeakerChain(u=u, widths=chain.widths, conductances=chain.conductances,
                       eta=chain.eta)


def consolidation_grad(chain):
    """-grad of the quadratic penalty w.r.t. each beaker column (P x N).

    u_k + (eta/C_k) * (this + delta_w injection on column 1) reproduces
    beaker_step exactly.
    """
    u, g = chain.u, chain.conductances
    out = np.zeros_like(u)
    n = u.shape[1]
    for k in range(n):
        if k > 0:
            out[:, k] += g[k - 1] * (u[:, k - 1] - u[:, k])
        if k < n - 1:
            out[:, k] += g[k] * (u[:, k + 1] - u[:, k])
    return out


def penalty(chain):
    """0.5 * sum_k g_{k,k+1} ||U_k - U_{k+1}||^2."""
    diffs = np.diff(chain.u, axis=1)
    return 0.5 * float(np.sum(chain.conductances * np.sum(diffs * diffs, axis=0)))


def wrap_optimizer(chain, raw_update):
    """Feed an arbitrary learning update through the chain.

    The raw update (e.g. an Adam step delta) is scaled to the delta_w that
    makes the visible beaker move by exactly raw_update in the absence of
    flow; returns (new chain, new visible weights).
    """
    raw_update = np.asarray(raw_update, dtype=np.float64)
    delta_w = raw_update * chain.widths[0] / chain.eta
    new_chain = beaker_step(chain, delta_w)
    return new_chain, new_chain.visible.copy()
