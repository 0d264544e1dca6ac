import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polcon.kernels import ADAM_IMPLS, BEAKER_IMPLS, GAE_IMPLS


def gae_oracle(rewards, values, dones, bootstrap, gamma, lam):
    """Brute-force truncated double sum of discounted TD errors."""
    horizon = len(rewards)
    adv = np.zeros(horizon)
    for t in range(horizon):
        coef = 1.0
        for step in range(t, horizon):
            nonterminal = 0.0 if dones[step] else 1.0
            next_value = bootstrap if step == horizon - 1 else values[step + 1]
            delta = rewards[step] + gamma * next_value * nonterminal - values[step]
            adv[t] += coef * delta
            if dones[step]:
                break
            coef *= gamma * lam
    return adv


@pytest.mark.parametrize("seed", range(5))
def test_gae_matches_double_sum_oracle(seed):
    rng = np.random.default_rng(seed)
    horizon = 32
    rewards = rng.normal(size=horizon)
    values = rng.normal(size=horizon)
    dones = rng.random(horizon) < 0.15
    boot = float(rng.normal())
    for name, fn in GAE_IMPLS.items():
        adv = fn(rewards, values, dones, boot, 0.99, 0.95)
        oracle = gae_oracle(rewards, values, dones, boot, 0.99, 0.95)
        assert np.max(np.abs(adv - oracle)) < 1e-10, name


def test_gae_lambda_zero_is_td_error():
    rng = np.random.default_rng(1)
    rewards, values = rng.normal(size=16), rng.normal(size=16)
    dones = np.zeros(16, dtype=bool)
    adv = GAE_IMPLS["numpy"](rewards, values, dones, 0.5, 0.9, 0.0)
    next_values = np.append(values[1:], 0.5)
    assert np.allclose(adv, rewards + 0.9 * next_values - values)


def test_gae_gamma_lam_one_is_reward_to_go():
    rewards = np.array([1.0, 2.0, 3.0])
    values = np.zeros(3)
    dones = np.array([False, False, True])
    adv = GAE_IMPLS["numpy"](rewards, values, dones, 99.0, 1.0, 1.0)
    assert np.allclose(adv, [6.0, 5.0, 3.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1, max_value=64), st.integers(min_value=0, max_value=2**32 - 1))
def test_gae_impls_bit_identical(horizon, seed):
    rng = np.random.default_rng(seed)
    rewards = rng.normal(size=horizon)
    values = rng.normal(size=horizon)
    dones = rng.random(horizon) < 0.2
    a = GAE_IMPLS["numpy"](rewards, values, dones, 0.1, 0.99, 0.95)
    b = GAE_IMPLS["numba"](rewards, values, dones, 0.1, 0.99, 0.95)
    assert np.array_equal(a, b)


def _adam_args(rng, n):
    return (
        rng.normal(size=n), rng.normal(size=n) * 0.01,
        rng.normal(size=n) * 0.01, np.abs(rng.normal(size=n)) * 1e-4,
        1.0 - 0.9 ** 7, 1.0 - 0.999 ** 7, 3e-4, 0.9, 0.999, 1e-8,
    )


def test_adam_impls_bit_identical():
    rng = np.random.default_rng(2)
    args = _adam_args(rng, 501)
    outs_np = ADAM_IMPLS["numpy"](*args)
    outs_nb = ADAM_IMPLS["numba"](*args)
    for a, b in zip(outs_np, outs_nb):
        assert np.array_equal(a, b)


def test_adam_impls_bit_identical_chained():
    rng = np.random.default_rng(3)
    n = 137
    p0, m0, v0 = rng.normal(size=n), np.zeros(n), np.zeros(n)
    p1, m1, v1 = p0.copy(), m0.copy(), v0.copy()
    for step in range(1, 60):
        g = rng.normal(size=n) * 0.05
        bc1, bc2 = 1.0 - 0.9 ** step, 1.0 - 0.999 ** step
        p0, m0, v0 = ADAM_IMPLS["numba"](p0, g, m0, v0, bc1, bc2, 1e-3, 0.9, 0.999, 1e-8)
        p1, m1, v1 = ADAM_IMPLS["numpy"](p1, g, m1, v1, bc1, bc2, 1e-3, 0.9, 0.999, 1e-8)
        assert np.array_equal(p0, p1) and np.array_equal(v0, v1)


def test_adam_matches_reference_formula():
    rng = np.random.default_rng(4)
    n = 17
    p = rng.normal(size=n)
    g = rng.normal(size=n)
    m = rng.normal(size=n) * 0.1
    v = np.abs(rng.normal(size=n)) * 0.01
    step, stepsize, b1, b2, eps = 3, 1e-3, 0.9, 0.999, 1e-8
    bc1, bc2 = 1.0 - b1 ** step, 1.0 - b2 ** step
    out_p, out_m, out_v = ADAM_IMPLS["numpy"](p, g, m, v, bc1, bc2, stepsize, b1, b2, eps)
    ref_m = b1 * m + (1 - b1) * g
    ref_v = b2 * v + (1 - b2) * g * g
    ref_p = p - stepsize * (ref_m / bc1) / (np.sqrt(ref_v / bc2) + eps)
    assert np.allclose(out_m, ref_m, atol=0, rtol=1e-15)
    assert np.allclose(out_v, ref_v, atol=0, rtol=1e-15)
    assert np.allclose(out_p, ref_p, atol=0, rtol=1e-12)


def test_beaker_impls_bit_identical():
    rng = np.random.default_rng(5)
    u = rng.normal(size=(211, 8))
    widths = 2.0 ** np.arange(8)
    conductances = 0.01 * 2.0 ** -np.arange(7)
    delta_w = rng.normal(size=211)
    a = BEAKER_IMPLS["numpy"](u, widths, conductances, 1.0, delta_w)
    b = BEAKER_IMPLS["numba"](u, widths, conductances, 1.0, delta_w)
    assert np.array_equal(a, b)


def test_beaker_kernel_simultaneous_update():
    # both beakers must read pre-step values: starting from (1, 0) with
    # C=(1,1), g=0.5, eta=1 and no injection, one step swaps half the gap
    u = np.array([[1.0, 0.0]])
    out = BEAKER_IMPLS["numpy"](u, np.ones(2), np.array([0.5]), 1.0, np.zeros(1))
    assert np.allclose(out, [[0.5, 0.5]])
