"""KL-constrained natural-gradient policy updates on imagined rollouts."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import kernels
from .autodiff import jacobian_vector_product, mlp_backward, mlp_forward
from .dynamics import RolloutBatch
from .policy import GaussianMlpPolicy, per_state_kl

RIDGE = 1e-5


@dataclass
class TrpoConfig:
    cg_iters: int = 10
    cg_damping: float = 0.1
    backtrack_factor: float = 0.8
    max_backtracks: int = 10
    kl_slack: float = 1.5
    # also bound the per-state TV on the sampled states (sup-form trust region)
    enforce_sup_tv: bool = True
    # Fisher products use at most this many (evenly strided) rollout states
    fvp_max_states: int = 1000


# -- value function --------------------------------------------------------

def value_features(obs: np.ndarray, timesteps: np.ndarray) -> np.ndarray:
    """[s, upper-triangular s s^T, time polynomial, 1]."""
    t = 0.01 * np.asarray(timesteps, dtype=np.float64)[:, None]
    iu, ju = np.triu_indices(obs.shape[1])
    quad = obs[:, iu] * obs[:, ju]
    return np.concatenate([obs, quad, t, t**2, t**3, np.ones_like(t)], axis=1)


@dataclass
class LinearValueFn:
    weights: np.ndarray

    def __call__(self, obs, timesteps) -> np.ndarray:
        return value_features(obs, timesteps) @ self.weights


def fit_value_fn(rollouts: RolloutBatch, gamma: float) -> LinearValueFn:
    """Ridge least squares of discounted returns-to-go on the feature map."""
    if len(rollouts) == 0:
        raise ValueError("cannot fit a value function on an empty batch")
    returns = kernels.discounted_returns(rollouts.rewards, rollouts.ends, gamma)
    feats = value_features(rollouts.obs, rollouts.timesteps)
    gram = feats.T @ feats + RIDGE * np.eye(feats.shape[1])
    w = np.linalg.solve(gram, feats.T @ returns)
    if not np.all(np.isfinite(w)):
        raise np.linalg.LinAlgError("value-function normal equations are singular")
    return LinearValueFn(w)


# -- advantages ------------------------------------------------------------

@dataclass
class AdvantageBatch:
    advantages: np.ndarray  # normalised
    raw: np.ndarray
    value_targets: np.ndarray
    returns: np.ndarray


def normalize(x: np.ndarray) -> np.ndarray:
    std = x.std()
    return (x - x.mean()) / (std if std > 1e-12 else 1.0)


def compute_gae(rollouts: RolloutBatch, value_fn, gamma: float, lam: float) -> AdvantageBatch:
    """GAE with V=0 after termination and V(s_next) at truncation."""
    values = value_fn(rollouts.obs, rollouts.timesteps)
    next_values = value_fn(rollouts.next_obs, rollouts.timesteps + 1)
    raw = kernels.gae(rollouts.rewards, values, next_values, rollouts.terminals,
                      rollouts.ends, gamma, lam)
    returns = kernels.discounted_returns(rollouts.rewards, rollouts.ends, gamma)
    return AdvantageBatch(normalize(raw), raw, raw + values, returns)


def explicit_kl_advantage(advantages: np.ndarray, policy: GaussianMlpPolicy,
                          bc_policy: GaussianMlpPolicy, states, alpha: float) -> np.ndarray:
    """A - alpha * KL(policy(.|s) || bc_policy(.|s)), per sample."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if alpha == 0:
        return np.array(advantages, dtype=np.float64, copy=True)
    kl = per_state_kl(policy.mean_action(states), policy.sigma,
                      bc_policy.mean_action(states), bc_policy.sigma)
    return advantages - alpha * kl


# -- surrogate, KL, Fisher -------------------------------------------------

def surrogate_and_grad(policy: GaussianMlpPolicy, flat: np.ndarray, rollouts: RolloutBatch,
                       advantages: np.ndarray, grad: bool = True):
    """mean(pi_new(a|s)/pi_old(a|s) * A) and its gradient w.r.t. ``flat``."""
    net = policy.net.view(flat)
    out, cache = mlp_forward(net, rollouts.obs, return_cache=True)
    m = np.tanh(out)
    sig = policy.sigma
    z = (rollouts.actions - m) / sig
    logp = np.sum(-0.5 * z * z - np.log(sig) - 0.5 * math.log(2 * math.pi), axis=1)
    with np.errstate(over="ignore"):
        ratio = np.exp(logp - rollouts.log_probs)
    if not np.all(np.isfinite(ratio)):
        bad = np.flatnonzero(~np.isfinite(ratio))
        raise FloatingPointError(
            f"non-finite importance ratios at {bad.size} samples (first {bad[0]}, "
            f"logp_new={logp[bad[0]]}, logp_old={rollouts.log_probs[bad[0]]})"
        )
    weighted = ratio * advantages
    loss = float(np.mean(weighted))
    if not grad:
        return loss, None
    # d logp / d m = (a - m)/sig^2 ; d m / d out = 1 - m^2
    up = (weighted / len(weighted))[:, None] * (z / sig) * (1.0 - m * m)
    return loss, mlp_backward(net, rollouts.obs, up, cache)


def _surrogate_from_means(means, sigma, rollouts, advantages) -> float:
    z = (rollouts.actions - means) / sigma
    logp = np.sum(-0.5 * z * z - np.log(sigma) - 0.5 * math.log(2 * math.pi), axis=1)
    return float(np.mean(np.exp(logp - rollouts.log_probs) * advantages))


def kl_and_grad(policy_old: GaussianMlpPolicy, flat: np.ndarray, states, old_means=None):
    """Mean KL(pi_flat || pi_old) over ``states`` (shared sigma) and its gradient."""
    net = policy_old.net.view(flat)
    out, cache = mlp_forward(net, states, return_cache=True)
    m = np.tanh(out)
    mo = policy_old.mean_action(states) if old_means is None else old_means
    sig2 = policy_old.sigma**2
    diff = m - mo
    kl = float(np.mean(np.sum(diff * diff / (2 * sig2), axis=1)))
    up = diff / sig2 * (1.0 - m * m) / states.shape[0]
    return kl, mlp_backward(net, states, up, cache)


def fisher_vector_product(policy: GaussianMlpPolicy, states, v, damping: float = 0.0):
    """(E_s[J^T J] / sigma^2 + damping) v, J the Jacobian of tanh(net(s))."""
    return make_fvp(policy, states, damping)(v)


def make_fvp(policy: GaussianMlpPolicy, states, damping: float = 0.0):
    """Fisher-vector product closure with the forward pass done once."""
    states = np.atleast_2d(states)
    out, cache = mlp_forward(policy.net, states, return_cache=True)
    dm_dout = 1.0 - np.tanh(out) ** 2
    scale = dm_dout * dm_dout / policy.sigma**2 / states.shape[0]

    def fvp(v):
        up = jacobian_vector_product(policy.net, states, v, cache) * scale
        return mlp_backward(policy.net, states, up, cache) + damping * np.asarray(v)

    return fvp


def conjugate_gradient(avp, b, iters=10, tol=1e-10):
    """Solve A x = b for SPD A given as a matrix-vector product."""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    for _ in range(iters):
        if rr < tol:
            break
        ap = avp(p)
        alpha = rr / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x, math.sqrt(rr)


def gaussian_tv_shared(mu_a, mu_b, sigma) -> np.ndarray:
    """Exact per-state TV between Gaussians sharing a diagonal covariance."""
    d = np.sqrt(np.sum(((mu_a - mu_b) / sigma) ** 2, axis=-1))
    return erf(d / (2.0 * math.sqrt(2.0)))


@dataclass
class TrpoStepReport:
    surrogate_improvement: float
    mean_kl: float
    max_tv: float
    backtracks: int
    cg_residual: float
    accepted: bool


def trpo_step(policy: GaussianMlpPolicy, rollouts: RolloutBatch, advantages: np.ndarray,
              delta: float, cfg: TrpoConfig = TrpoConfig()):
    """One natural-gradient step with backtracking line search.

    Accepts the first candidate that improves the surrogate and keeps the
    mean KL within ``kl_slack * delta`` (and, if enabled, every sampled
    state's TV within ``sqrt(delta / 2)``). Returns the input policy with
    ``accepted=False`` if no candidate qualifies.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    theta = policy.net.flat
    loss0, g = surrogate_and_grad(policy, theta, rollouts, advantages)
    n = len(rollouts)
    stride = max(1, math.ceil(n / cfg.fvp_max_states))
    fvp_states = rollouts.obs[::stride]

    fvp = make_fvp(policy, fvp_states, cfg.cg_damping)
    if not np.any(g):
        return policy, TrpoStepReport(0.0, 0.0, 0.0, 0, 0.0, False)
    x, residual = conjugate_gradient(fvp, g, cfg.cg_iters)
    shs = float(x @ fvp(x))
    if not (shs > 0 and math.isfinite(shs)):
        return policy, TrpoStepReport(0.0, 0.0, 0.0, 0, residual, False)
    step = math.sqrt(2.0 * delta / shs) * x
    old_means = rollouts.means
    tv_cap = math.sqrt(delta / 2.0)
    scale = 1.0
    for j in range(cfg.max_backtracks):
        cand = theta + scale * step
        new_means = np.tanh(mlp_forward(policy.net.view(cand), rollouts.obs))
        loss = _surrogate_from_means(new_means, policy.sigma, rollouts, advantages)
        kl = float(np.mean(per_state_kl(new_means, policy.sigma, old_means, policy.sigma)))
        tv = float(np.max(gaussian_tv_shared(new_means, old_means, policy.sigma)))
        improve = loss - loss0
        tv_ok = tv <= tv_cap or not cfg.enforce_sup_tv
        if improve > 0 and kl <= cfg.kl_slack * delta and tv_ok:
            return (policy.with_params(cand),
                    TrpoStepReport(improve, kl, tv, j, residual, True))
        shrink = cfg.backtrack_factor
        if not tv_ok:
            # TV grows about linearly in the step size near the old policy
            shrink = min(shrink, 0.98 * tv_cap / tv)
        scale *= shrink
    return policy, TrpoStepReport(0.0, 0.0, 0.0, cfg.max_backtracks, residual, False)
