"""Hot sequential kernels, numba-compiled with a pure-numpy fallback.

The matrix-heavy parts of the codebase (network forward/backward passes)
already run on BLAS and gain nothing from numba; the kernels here are the
loops that cannot be vectorised: the GAE recursion, the Adam update on flat
parameter vectors, and the beaker-chain Euler step.

Set ``POLCON_NO_NUMBA=1`` to select the numpy implementations (used by the
cross-check tests and by ``benchmarks/bench_kernels.py``). Both paths use
identical arithmetic order, so results are bit-identical either way.
"""

import os

import numpy as np

USE_NUMBA = os.environ.get("POLCON_NO_NUMBA", "0").lower() not in ("1", "true", "yes")


def _gae_py(rewards, values, dones, bootstrap_value, gamma, lam):
    horizon = rewards.shape[0]
    advantages = np.empty(horizon)
    next_value = bootstrap_value
    running = 0.0
    for t in range(horizon - 1, -1, -1):
        nonterminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        advantages[t] = running
        next_value = values[t]
    return advantages


def _adam_py(params, grads, m, v, bc1, bc2, stepsize, beta1, beta2, eps):
    out_m = beta1 * m + (1.0 - beta1) * grads
    out_v = beta2 * v + (1.0 - beta2) * grads * grads
    m_hat = out_m / bc1
    v_hat = out_v / bc2
    out_p = params - stepsize * m_hat / (np.sqrt(v_hat) + eps)
    return out_p, out_m, out_v


def _adam_loop(params, grads, m, v, bc1, bc2, stepsize, beta1, beta2, eps):
    # bc1/bc2 are the bias corrections 1 - beta**step, computed by the
    # caller: float-int power rounds differently under LLVM and libm, and
    # both kernel paths must stay bit-identical.
    out_p = np.empty_like(params)
    out_m = np.empty_like(m)
    out_v = np.empty_like(v)
    for i in range(params.shape[0]):
        mi = beta1 * m[i] + (1.0 - beta1) * grads[i]
        vi = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i]
        out_m[i] = mi
        out_v[i] = vi
        out_p[i] = params[i] - stepsize * (mi / bc1) / (np.sqrt(vi / bc2) + eps)
    return out_p, out_m, out_v


def _beaker_py(u, widths, conductances, eta, delta_w):
    n_beakers = u.shape[1]
    out = np.empty_like(u)
    for k in range(n_beakers):
        flow = np.zeros(u.shape[0])
        if k == 0:
            flow += delta_w
        else:
            flow += conductances[k - 1] * (u[:, k - 1] - u[:, k])
        if k < n_beakers - 1:
            flow += conductances[k] * (u[:, k + 1] - u[:, k])
        out[:, k] = u[:, k] + (eta / widths[k]) * flow
    return out


def _beaker_loop(u, widths, conductances, eta, delta_w):
    n_params, n_beakers = u.shape
    out = np.empty_like(u)
    for i in range(n_params):
        for k in range(n_beakers):
            flow = 0.0
            if k == 0:
                flow += delta_w[i]
            else:
                flow += conductances[k - 1] * (u[i, k - 1] - u[i, k])
            if k < n_beakers - 1:
                flow += conductances[k] * (u[i, k + 1] - u[i, k])
            out[i, k] = u[i, k] + (eta / widths[k]) * flow
    return out


try:
    from numba import njit

    _gae_nb = njit(cache=True)(_gae_py)
    _adam_nb = njit(cache=True)(_adam_loop)
    _beaker_nb = njit(cache=True)(_beaker_loop)
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _gae_nb = _gae_py
    _adam_nb = _adam_py
    _beaker_nb = _beaker_py
    HAVE_NUMBA = False

GAE_IMPLS = {"numpy": _gae_py, "numba": _gae_nb}
ADAM_IMPLS = {"numpy": _adam_py, "numba": _adam_nb}
BEAKER_IMPLS = {"numpy": _beaker_py, "numba": _beaker_nb}

if USE_NUMBA and HAVE_NUMBA:
    gae_kernel = _gae_nb
    adam_kernel = _adam_nb
    beaker_kernel = _beaker_nb
else:
    gae_kernel = _gae_py
    adam_kernel = _adam_py
    beaker_kernel = _beaker_py
