import numpy as np
import pytest

from polcon import autodiff as ad
from polcon import diffnet
from polcon.diffnet import (
    AdamState,
    GaussDist,
    NetworkSpec,
    adam_step,
    clip_grad_norm,
    entropy,
    forward,
    grad,
    init_network,
    kl_divergence,
    layout_for,
    log_prob,
    param_size,
)

from conftest import max_rel_err, numeric_grad


def expected_param_count(spec):
    total, fan_in = 0, spec.obs_dim
    for width in spec.hidden_widths:
        total += fan_in * width + width
        fan_in = width
    total += fan_in * spec.act_dim + spec.act_dim  # mean head
    total += spec.act_dim  # log_std
    total += fan_in * 1 + 1  # value head
    return total


@pytest.mark.parametrize("dims", [(4, 2, (64, 64)), (3, 1, (8,)), (6, 3, (16, 8))])
def test_param_size_matches_layout_formula(dims):
    spec = NetworkSpec(*dims)
    assert param_size(spec) == expected_param_count(spec)
    assert sum(int(np.prod(s)) for _, s in layout_for(spec)) == param_size(spec)


def test_default_network_param_count():
    # 4*64+64 + 64*64+64 + 64*2+2 + 2 + 64+1 = 4677
    assert param_size(NetworkSpec(4, 2)) == 4677


def test_spec_validation():
    with pytest.raises(ValueError):
        NetworkSpec(0, 2)
    with pytest.raises(ValueError):
        NetworkSpec(4, 2, hidden_widths=())
    with pytest.raises(ValueError):
        NetworkSpec(4, 2, activation="tanh")


def test_init_deterministic_and_orthogonal():
    spec = NetworkSpec(4, 2)
    a = init_network(spec, seed=3)
    b = init_network(spec, seed=3)
    c = init_network(spec, seed=4)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)
    # w0 is (4, 64): rows orthogonal with gain sqrt(2)
    w0 = a["w0"]
    assert np.allclose(w0 @ w0.T, 2.0 * np.eye(4), atol=1e-12)
    assert np.allclose(a["b0"], 0.0)
    assert np.allclose(a["log_std"], 0.0)
    # small policy head gain
    assert np.linalg.norm(a["w_mean"]) < 0.1


def test_forward_shapes_and_rejects_nonfinite(small_params):
    dists, values = forward(small_params, np.zeros((7, 3)))
    assert dists.means.shape == (7, 2)
    assert values.shape == (7,)
    with pytest.raises(ValueError):
        forward(small_params, np.array([[np.nan, 0.0, 0.0]]))


def test_log_std_clipped(small_params):
    params = small_params.copy()
    params["log_std"][...] = np.array([5.0, -30.0])
    dists, _ = forward(params, np.zeros((1, 3)))
    assert np.array_equal(dists.log_std, [2.0, -20.0])


def test_kl_hand_value():
    p = GaussDist(np.array([0.0]), np.array([0.0]))
    q = GaussDist(np.array([1.0]), np.array([0.0]))
    assert abs(kl_divergence(p, q) - 0.5) < 1e-12
    assert abs(kl_divergence(p, p)) < 1e-15


def test_kl_asymmetry_and_positivity():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = GaussDist(rng.normal(size=3), rng.normal(size=3) * 0.5)
        q = GaussDist(rng.normal(size=3), rng.normal(size=3) * 0.5)
        assert kl_divergence(p, q) > 0.0
        assert kl_divergence(p, q) != pytest.approx(kl_divergence(q, p), abs=1e-12)


def test_entropy_and_logp_hand_values():
    d = GaussDist(np.zeros(1), np.zeros(1))
    assert entropy(d) == pytest.approx(0.5 * (1.0 + np.log(2.0 * np.pi)), abs=1e-12)
    assert log_prob(d, np.zeros(1)) == pytest.approx(-0.5 * np.log(2.0 * np.pi), abs=1e-12)


def test_tape_forward_matches_numpy_forward(small_params):
    obs = np.random.default_rng(1).normal(size=(6, 3))
    dists, values = forward(small_params, obs)
    leaves = diffnet.leaves_from(small_params)
    mean_t, log_std_t, hidden = diffnet.tape_forward(leaves, small_params.spec, obs)
    assert np.array_equal(mean_t.data, dists.means)
    assert np.array_equal(log_std_t.data, dists.log_std)
    v = ad.affine(hidden, leaves["w_value"], leaves["b_value"])
    assert np.array_equal(v.data[:, 0], values)


def test_stacked_tape_forward_bit_identical(small_spec):
    nets = [init_network(small_spec, seed=s) for s in range(3)]
    obs = np.random.default_rng(2).normal(size=(5, 3))
    leaves = diffnet.stacked_leaves(nets)
    mean_st, log_std_st, _ = diffnet.tape_forward(leaves, small_spec, obs)
    for k, net in enumerate(nets):
        single_leaves = diffnet.leaves_from(net)
        mean_t, log_std_t, _ = diffnet.tape_forward(single_leaves, small_spec, obs)
        assert np.array_equal(mean_st.data[k], mean_t.data)
        assert np.array_equal(log_std_st.data[k], log_std_t.data)


def test_grad_matches_fd(small_params):
    rng = np.random.default_rng(3)
    obs = rng.normal(size=(4, 3))
    target = rng.normal(size=(4, 2))

    def loss_fn(leaves):
        mean_t, _, _ = diffnet.tape_forward(leaves, small_params.spec, obs)
        return ad.amean(ad.square(ad.sub(mean_t, ad.constant(target))))

    _, analytic = grad(small_params, loss_fn)

    def value(flat):
        p = small_params.replace_values(flat)
        dists, _ = forward(p, obs)
        return float(np.mean((dists.means - target) ** 2))

    numeric = numeric_grad(value, small_params.values.copy())
    assert max_rel_err(analytic, numeric) < 1e-5


def test_clip_grad_norm():
    g = np.array([3.0, 4.0])
    clipped = clip_grad_norm(g, 0.5)
    assert np.linalg.norm(clipped) == pytest.approx(0.5, abs=1e-12)
    small = np.array([0.1, 0.0])
    assert np.array_equal(clip_grad_norm(small, 0.5), small)
    with pytest.raises(ValueError):
        clip_grad_norm(g, 0.0)


def test_adam_step_properties(small_params):
    state = AdamState.zeros(param_size(small_params.spec))
    g = np.random.default_rng(4).normal(size=small_params.values.shape)
    new_params, new_state = adam_step(small_params, g, state, 1e-3)
    assert new_state.step_count == 1
    assert not np.array_equal(new_params.values, small_params.values)
    # first step with zero moments moves each param by ~stepsize
    moved = np.abs(new_params.values - small_params.values)
    assert np.all(moved < 1.01e-3)
    with pytest.raises(ValueError):
        adam_step(small_params, np.full_like(g, np.nan), state, 1e-3)
    with pytest.raises(ValueError):
        adam_step(small_params, g, state, 0.0)


def test_param_vector_roundtrip(small_params):
    copy = small_params.copy()
    copy["w0"][...] = 0.0
    assert not np.array_equal(copy.values, small_params.values)
    assert np.array_equal(small_params["w0"], init_network(small_params.spec, 0)["w0"])
