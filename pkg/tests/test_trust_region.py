import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bremen.envs import make_env
from bremen.policy import GaussianMlpPolicy, mean_kl, random_policy
from bremen.trust_region import (TrpoConfig, compute_gae, conjugate_gradient, explicit_kl_advantage,
                                 fisher_vector_product, fit_value_fn, gaussian_tv_shared, kl_and_grad,
                                 normalize, surrogate_and_grad, trpo_step, value_features)

from helpers import make_batch, random_batch


def _policy(seed, sizes=(3, 6, 2), sigma=0.3):
    rng = np.random.default_rng(seed)
    return random_policy(sizes[0], sizes[-1], sizes[1:-1], sigma, rng, out_scale=1.0)


class ZeroV:
    def __call__(self, obs, t):
        return np.zeros(len(obs))


# -- value function --------------------------------------------------------

def test_feature_layout():
    f = value_features(np.array([[1.0, 2.0]]), np.array([100]))
    np.testing.assert_allclose(f, [[1, 2, 1, 2, 4, 1, 1, 1, 1]])


def test_value_fit_constant_reward_geometric_series():
    rng = np.random.default_rng(0)
    # horizon 5x the effective horizon 1/(1-gamma); a cubic time basis cannot follow
    # the end-of-episode cliff when the horizon is much longer
    gamma, H, n_traj = 0.9, 50, 8
    n = H * n_traj
    ends = np.zeros(n, bool)
    ends[H - 1::H] = True
    rb = make_batch(rng.normal(size=(n, 2)), np.zeros((n, 1)), np.ones(n), ends)
    v = fit_value_fn(rb, gamma)
    early = v(rb.obs[rb.timesteps < 10], rb.timesteps[rb.timesteps < 10])
    assert np.all(np.abs(early - 1 / (1 - gamma)) <= 0.05 / (1 - gamma))


def test_value_fit_zero_reward_and_optimality():
    rng = np.random.default_rng(1)
    n = 200
    ends = rng.random(n) < 0.1
    ends[-1] = True
    rb = make_batch(rng.normal(size=(n, 3)), np.zeros((n, 1)), np.zeros(n), ends)
    assert np.linalg.norm(fit_value_fn(rb, 0.9).weights) < 1e-6
    rb = make_batch(rng.normal(size=(n, 3)), np.zeros((n, 1)), rng.normal(size=n), ends)
    v = fit_value_fn(rb, 0.9)
    from bremen.kernels import discounted_returns
    ret = discounted_returns(rb.rewards, rb.ends, 0.9)
    assert np.sum((v(rb.obs, rb.timesteps) - ret) ** 2) <= np.sum(ret**2)


def test_value_fit_empty():
    with pytest.raises(ValueError):
        fit_value_fn(make_batch(np.zeros((0, 2)), np.zeros((0, 1)), np.zeros(0), np.zeros(0, bool)), 0.9)


# -- GAE -------------------------------------------------------------------

def test_gae_three_step_toy():
    rb = make_batch(np.zeros((3, 1)), np.zeros((3, 1)), [1.0, 1.0, 1.0], [False, False, True],
                    terminals=[False, False, True])
    adv = compute_gae(rb, ZeroV(), 0.5, 0.5)
    np.testing.assert_array_equal(adv.raw, [1.3125, 1.25, 1.0])


class RandV:
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def __call__(self, obs, t):
        return obs[:, 0] * 0.7 - 0.1 * t


def test_gae_lambda_zero_is_td_error():
    rng = np.random.default_rng(2)
    rb = random_batch(_policy(0), rng, 50)
    v = RandV(0)
    adv = compute_gae(rb, v, 0.9, 0.0)
    nv = np.where(rb.terminals, 0.0, v(rb.next_obs, rb.timesteps + 1))
    np.testing.assert_allclose(adv.raw, rb.rewards + 0.9 * nv - v(rb.obs, rb.timesteps), atol=1e-12)


def test_gae_lambda_one_zero_value_is_return():
    rb = random_batch(_policy(0), np.random.default_rng(3), 50)
    adv = compute_gae(rb, ZeroV(), 0.9, 1.0)
    np.testing.assert_allclose(adv.raw, adv.returns, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=300))
def test_normalize_moments(xs):
    x = np.array(xs)
    y = normalize(x)
    assert abs(y.mean()) < 1e-10
    if x.std() > 1e-6 * max(1.0, np.abs(x).max()):
        assert abs(y.std() - 1) < 1e-8


# -- surrogate / KL / Fisher -----------------------------------------------

def test_surrogate_at_old_policy_is_mean_advantage():
    pol = _policy(1)
    rb = random_batch(pol, np.random.default_rng(0))
    adv = np.random.default_rng(1).normal(size=len(rb))
    loss, g = surrogate_and_grad(pol, pol.net.flat, rb, adv)
    assert loss == pytest.approx(adv.mean(), abs=1e-12)
    _, g2 = surrogate_and_grad(pol, pol.net.flat, rb, 2 * adv)
    np.testing.assert_allclose(g2, 2 * g, rtol=1e-12, atol=1e-15)


def test_surrogate_nonfinite_ratio_diagnostic():
    pol = _policy(1)
    rb = random_batch(pol, np.random.default_rng(0))
    rb.log_probs[3] = -1e6
    with pytest.raises(FloatingPointError, match="first 3"):
        surrogate_and_grad(pol, pol.net.flat, rb, np.ones(len(rb)))


def _fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.mark.parametrize("seed", range(10))
def test_surrogate_grad_fd(seed):
    pol = _policy(seed, (2, 4, 1))
    rng = np.random.default_rng(seed + 100)
    rb = random_batch(pol, rng, 20)
    adv = rng.normal(size=20)
    theta = pol.net.flat + 0.05 * rng.normal(size=pol.net.n_params)
    _, g = surrogate_and_grad(pol, theta, rb, adv)
    fd = _fd(lambda f: surrogate_and_grad(pol, f, rb, adv, grad=False)[0], theta)
    assert np.max(np.abs(g - fd) / np.maximum(1e-8, np.abs(g) + np.abs(fd))) < 1e-4


def test_fvp_zero_and_length():
    pol = _policy(0)
    s = np.random.default_rng(0).normal(size=(10, 3))
    assert np.all(fisher_vector_product(pol, s, np.zeros(pol.net.n_params)) == 0)
    with pytest.raises(ValueError):
        fisher_vector_product(pol, s, np.zeros(pol.net.n_params + 1))


def test_fvp_matches_kl_hessian_and_psd():
    pol = _policy(4)
    rng = np.random.default_rng(5)
    s = rng.normal(size=(30, 3))
    theta = pol.net.flat
    for _ in range(5):
        v = rng.normal(size=theta.size)
        h = 1e-5
        fd = (kl_and_grad(pol, theta + h * v, s)[1] - kl_and_grad(pol, theta - h * v, s)[1]) / (2 * h)
        fv = fisher_vector_product(pol, s, v)
        assert np.linalg.norm(fv - fd) / np.linalg.norm(fd) < 1e-3
    for _ in range(100):
        v = rng.normal(size=theta.size)
        assert v @ fisher_vector_product(pol, s, v) >= 0


def test_conjugate_gradient_diag():
    x, res = conjugate_gradient(lambda v: 2 * v, np.array([2.0, 4.0]), iters=2)
    np.testing.assert_allclose(x, [1.0, 2.0], atol=1e-15)
    assert res < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_conjugate_gradient_spd(seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(5, 5))
    a = m @ m.T + 0.5 * np.eye(5)
    b = rng.normal(size=5)
    x, _ = conjugate_gradient(lambda v: a @ v, b, iters=50, tol=1e-24)
    np.testing.assert_allclose(a @ x, b, atol=1e-8)


def test_tv_shared_closed_form():
    assert gaussian_tv_shared(np.zeros(1), np.ones(1), 1.0) == pytest.approx(math.erf(0.5 / math.sqrt(2)))
    assert gaussian_tv_shared(np.zeros(2), np.zeros(2), 0.1) == 0.0


# -- trpo step -------------------------------------------------------------

def test_trpo_zero_advantages_unchanged():
    pol = _policy(0)
    rb = random_batch(pol, np.random.default_rng(0))
    new, rep = trpo_step(pol, rb, np.zeros(len(rb)), 0.05)
    assert new is pol and not rep.accepted
    with pytest.raises(ValueError):
        trpo_step(pol, rb, np.zeros(len(rb)), 0.0)


def test_trpo_on_pointmass_rollouts():
    from bremen.dynamics import imaginary_rollout
    env = make_env("pointmass")

    class TrueModel:
        k = 1

        def predict(self, m, s, a):
            return env.dynamics(s, a)

    pol = random_policy(4, 2, (16,), 0.1, np.random.default_rng(0))
    rb = imaginary_rollout(TrueModel(), pol, env.reset_batch(200, 0), 50, env, np.random.default_rng(1), 3000)
    v = fit_value_fn(rb, 0.99)
    adv = compute_gae(rb, v, 0.99, 0.95)
    new, rep = trpo_step(pol, rb, adv.advantages, 0.05)
    assert rep.accepted
    assert 0 < rep.mean_kl <= 1.5 * 0.05
    assert rep.max_tv <= math.sqrt(0.05 / 2) + 1e-12
    assert rep.surrogate_improvement > 0
    assert mean_kl(new, pol, rb.obs) == pytest.approx(rep.mean_kl, rel=1e-9)
    assert abs(adv.advantages.mean()) < 1e-10 and abs(adv.advantages.std() - 1) < 1e-8


def test_explicit_kl_advantage():
    pol = _policy(0)
    other = _policy(1)
    s = np.random.default_rng(0).normal(size=(10, 3))
    a = np.arange(10.0)
    np.testing.assert_array_equal(explicit_kl_advantage(a, pol, other, s, 0.0), a)
    np.testing.assert_array_equal(explicit_kl_advantage(a, pol, pol, s, 0.3), a)
    pen = explicit_kl_advantage(a, pol, other, s, 0.3)
    assert np.all(pen <= a)
    with pytest.raises(ValueError):
        explicit_kl_advantage(a, pol, other, s, -1.0)
