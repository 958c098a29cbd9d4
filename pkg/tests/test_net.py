import math

import numpy as np
import pytest

from helpers import finite_difference_grad, max_relative_error
from quadnav.net import (
    LOG_STD_MIN,
    Adam,
    GaussianPolicy,
    Mlp,
    clip_grad_norm,
    gaussian_entropy,
    gaussian_head,
    gaussian_log_prob,
    gaussian_log_prob_grads,
    global_norm,
    orthogonal,
    sample_action,
)


def tiny_net():
    net = Mlp(2, 1, hidden=3)
    net.params.update(
        W1=np.eye(2, 3), b1=np.zeros(3), W2=np.eye(3), b2=np.zeros(3),
        W3=np.ones((3, 1)), b3=np.zeros(1),
    )
    return net


def test_forward_tiny_identity_net():
    net = tiny_net()
    assert net(np.array([[1.0, 2.0]]))[0, 0] == 3.0
    assert net(np.array([[-1.0, -2.0]]))[0, 0] == 0.0


def test_forward_rejects_wrong_width():
    with pytest.raises(ValueError):
        Mlp(12, 4)(np.zeros((2, 11)))


def test_forward_batch_order_equivariant():
    rng = np.random.default_rng(0)
    net = Mlp(12, 4, rng=rng)
    x = rng.normal(size=(64, 12))
    perm = rng.permutation(64)
    np.testing.assert_array_equal(net(x)[perm], net(x[perm]))


def test_orthogonal_init_gain():
    w = orthogonal(np.random.default_rng(1), 12, 128, math.sqrt(2))
    np.testing.assert_allclose(w @ w.T, 2 * np.eye(12), atol=1e-12)


def test_policy_init_small_output_and_unit_std():
    pol = GaussianPolicy(rng=np.random.default_rng(2))
    assert np.all(pol.log_std == 0.0)
    x = np.random.default_rng(3).uniform(-1, 1, (100, 12))
    assert np.max(np.abs(pol.mean(x))) < 0.2


# ---------------------------------------------------------------- gaussian
def test_gaussian_log_prob_unit_examples():
    lp = gaussian_log_prob(np.zeros((1, 4)), np.zeros(4), np.zeros((1, 4)))[0]
    assert lp == pytest.approx(-2 * math.log(2 * math.pi), abs=1e-12)
    assert lp == pytest.approx(-3.67575, abs=1e-5)
    ent = gaussian_entropy(np.zeros(4))
    assert ent == pytest.approx(2 * (1 + math.log(2 * math.pi)), abs=1e-12)
    assert ent == pytest.approx(5.67575, abs=1e-5)


def test_gaussian_log_prob_matches_scalar_density():
    rng = np.random.default_rng(4)
    mean, log_std, a = rng.normal(size=(5, 4)), rng.normal(size=4) * 0.5, rng.normal(size=(5, 4))
    lp = gaussian_log_prob(mean, log_std, a)
    for i in range(5):
        dens = 1.0
        for j in range(4):
            s = math.exp(log_std[j])
            dens *= math.exp(-0.5 * ((a[i, j] - mean[i, j]) / s) ** 2) / (s * math.sqrt(2 * math.pi))
        assert lp[i] == pytest.approx(math.log(dens), abs=1e-12)
    _, ent = gaussian_head(mean, log_std, a)
    assert ent.shape == (5,)


def test_sampling_statistics():
    rng = np.random.default_rng(5)
    n = 200_000
    log_std = np.log(np.array([0.5, 1.0, 2.0, 0.1]))
    mean = np.array([0.3, -1.0, 0.0, 2.0])
    a = sample_action(np.tile(mean, (n, 1)), log_std, rng)
    assert np.all(np.abs(a.mean(axis=0) - mean) <= 5 * np.exp(log_std) / math.sqrt(n))
    np.testing.assert_allclose(a.std(axis=0), np.exp(log_std), rtol=0.01)


def test_sampling_deterministic_given_seed():
    m = np.zeros((3, 4))
    a = sample_action(m, np.zeros(4), np.random.default_rng(9))
    b = sample_action(m, np.zeros(4), np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_entropy_lower_bound_at_clamp_floor():
    pol = GaussianPolicy()
    pol.log_std[:] = -50.0
    pol.clamp_log_std()
    assert np.all(pol.log_std == LOG_STD_MIN)
    assert gaussian_entropy(pol.log_std) >= 4 * 0.5 * (1 + math.log(2 * math.pi)) + 4 * LOG_STD_MIN - 1e-12


def test_log_prob_grads_finite_difference():
    rng = np.random.default_rng(6)
    mean, log_std, a = rng.normal(size=(1, 4)), rng.normal(size=4) * 0.3, rng.normal(size=(1, 4))
    dmean, dlogstd = gaussian_log_prob_grads(mean, log_std, a)
    num_mean = finite_difference_grad(lambda: gaussian_log_prob(mean, log_std, a)[0], mean)
    num_std = finite_difference_grad(lambda: gaussian_log_prob(mean, log_std, a)[0], log_std)
    assert max_relative_error(dmean, num_mean) <= 1e-6
    assert max_relative_error(dlogstd[0], num_std) <= 1e-6


# ---------------------------------------------------------------- backprop
def test_zero_output_gradient_gives_zero_gradients():
    net = Mlp(3, 2, hidden=5, rng=np.random.default_rng(0))
    y, cache = net.forward(np.ones((4, 3)))
    for g in net.backward(cache, np.zeros_like(y)).values():
        assert not np.any(g)


def test_linear_unit_gradient_is_input():
    net = tiny_net()
    x = np.array([[0.7, 1.3]])
    y, cache = net.forward(x)
    g = net.backward(cache, np.ones_like(y))
    np.testing.assert_array_equal(g["W3"][:, 0], [0.7, 1.3, 0.0])


def test_relu_dead_zone_blocks_gradient():
    net = Mlp(2, 1, hidden=4, rng=np.random.default_rng(1))
    net.params["b1"][2] = -1e3  # unit 2 never activates
    y, cache = net.forward(np.random.default_rng(2).normal(size=(16, 2)))
    g = net.backward(cache, np.ones_like(y))
    assert np.all(g["W1"][:, 2] == 0) and g["b1"][2] == 0


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = Mlp(3, 2, hidden=5, rng=rng)
    for p in net.params.values():
        p += rng.normal(scale=0.3, size=p.shape)
    x = rng.normal(size=(7, 3))
    weights = rng.normal(size=(7, 2))
    objective = lambda: float(np.sum(np.sin(net(x)) * weights))
    y, cache = net.forward(x)
    grads = net.backward(cache, np.cos(y) * weights)
    for k, p in net.params.items():
        assert max_relative_error(grads[k], finite_difference_grad(objective, p)) <= 1e-6, k


# -------------------------------------------------------------------- adam
def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    opt = Adam(p)
    opt.step(p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_closed_form():
    p = {"w": np.array([0.0])}
    opt = Adam(p, lr=0.001)
    opt.step(p, {"w": np.array([1.0])})
    assert p["w"][0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)
    assert p["w"][0] == pytest.approx(-0.000999999, abs=1e-9)


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(3)
        p = {"w": rng.normal(size=(4, 4))}
        opt = Adam(p, lr=1e-2)
        for _ in range(100):
            opt.step(p, {"w": rng.normal(size=(4, 4))})
        return p["w"]
    np.testing.assert_array_equal(run(), run())


def test_adam_no_nan_over_many_updates():
    rng = np.random.default_rng(4)
    p = {"w": rng.normal(size=8), "b": rng.normal(size=2)}
    opt = Adam(p, lr=1e-3)
    for _ in range(100_000):
        g = {k: rng.normal(size=v.shape) * 10 ** rng.uniform(-8, 3) for k, v in p.items()}
        clip_grad_norm(g, 1e3)
        opt.step(p, g)
    assert all(np.all(np.isfinite(v)) for v in p.values())


def test_clip_grad_norm():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    assert clip_grad_norm(g, 1.0) == pytest.approx(5.0)
    assert global_norm(g) == pytest.approx(1.0, rel=1e-9)
    h = {"a": np.array([0.3])}
    clip_grad_norm(h, 1.0)
    assert h["a"][0] == 0.3
