"""Analytic continuous-control environments.

Every environment exposes pure, vectorised ``dynamics``, ``reward`` and
``terminal`` functions over arrays of shape ``(..., state_dim)``, so the same
reward/termination code scores both real and model-imagined states. Only
:meth:`Env.step` counts as a real-environment interaction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    state_dim: int
    action_dim: int
    horizon: int = 200
    action_low: float = -1.0
    action_high: float = 1.0

    def __post_init__(self):
        if self.horizon < 1 or self.state_dim < 1 or self.action_dim < 1:
            raise ValueError(f"invalid env spec {self}")


@dataclass
class EnvState:
    state: np.ndarray
    step: int = 0


class Env:
    """Base class; subclasses fill in the analytic pieces."""

    env_id = ""
    state_dim = 0
    action_dim = 0
    periodic_dims: tuple = ()  # angle coordinates kept in [-pi, pi)

    def __init__(self, horizon: int = 200):
        self.spec = EnvSpec(self.env_id, self.state_dim, self.action_dim, horizon)
        self.n_steps = 0  # real transitions taken through step()/step_batch()

    @property
    def horizon(self) -> int:
        return self.spec.horizon

    # pure pieces ---------------------------------------------------------
    def sample_initial(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def dynamics(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def reward(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def terminal(self, s: np.ndarray) -> np.ndarray:
        return np.zeros(np.shape(s)[:-1], dtype=bool)

    def clip_action(self, a: np.ndarray) -> np.ndarray:
        return np.clip(a, self.spec.action_low, self.spec.action_high)

    # real interaction ----------------------------------------------------
    def reset(self, seed) -> EnvState:
        rng = np.random.default_rng(seed)
        return EnvState(self.sample_initial(rng, 1)[0], 0)

    def reset_batch(self, n: int, seed) -> np.ndarray:
        return self.sample_initial(np.random.default_rng(seed), n)

    def step(self, state: EnvState, action) -> tuple[EnvState, float, bool]:
        a = np.asarray(action, dtype=np.float64)
        if a.shape != (self.action_dim,):
            raise ValueError(f"action shape {a.shape}, expected ({self.action_dim},)")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"non-finite action {a}")
        a = self.clip_action(a)
        s = state.state
        r = float(self.reward(s, a))
        s_next = self.dynamics(s, a)
        self.n_steps += 1
        t = state.step + 1
        done = bool(self.terminal(s_next)) or t >= self.horizon
        return EnvState(s_next, t), r, done

    def step_batch(self, s: np.ndarray, a: np.ndarray):
        """Vectorised real step on a batch of independent states."""
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (s.shape[0], self.action_dim):
            raise ValueError(f"action batch shape {a.shape} does not match states {s.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite action in batch")
        a = self.clip_action(a)
        r = self.reward(s, a)
        s_next = self.dynamics(s, a)
        self.n_steps += s.shape[0]
        return s_next, r, self.terminal(s_next)


class PointMassLQR(Env):
    """Planar double integrator with quadratic cost.

    State ``[x, y, vx, vy]``, action is acceleration. The reward carries a
    control cost ``a'Ra`` on top of ``s'Qs`` so the LQR problem is well posed.
    """

    env_id = "pointmass"
    state_dim = 4
    action_dim = 2
    dt = 0.1

    def __init__(self, horizon: int = 200, q=(1.0, 1.0, 0.1, 0.1), r_ctrl=1.0,
                 pos_range: float = 0.5, vel_range: float = 0.2, drag: float = 1.0):
        super().__init__(horizon)
        self.pos_range, self.vel_range = float(pos_range), float(vel_range)
        dt = self.dt
        keep = 1.0 - float(drag) * dt
        self.A = np.array(
            [[1, 0, dt, 0], [0, 1, 0, dt], [0, 0, keep, 0], [0, 0, 0, keep]], dtype=np.float64
        )
        self.B = np.array([[0, 0], [0, 0], [dt, 0], [0, dt]], dtype=np.float64)
        self.Q = np.diag(np.asarray(q, dtype=np.float64))
        self.R = float(r_ctrl) * np.eye(2)

    def sample_initial(self, rng, n):
        pos = rng.uniform(-self.pos_range, self.pos_range, size=(n, 2))
        vel = rng.uniform(-self.vel_range, self.vel_range, size=(n, 2))
        return np.concatenate([pos, vel], axis=1)

    # elementwise products instead of matmul: results must not depend on batch size
    def dynamics(self, s, a):
        return _matvec(self.A, s) + _matvec(self.B, a)

    def reward(self, s, a):
        qs = np.sum(_matvec(self.Q, s) * s, axis=-1)
        ra = np.sum(_matvec(self.R, a) * a, axis=-1)
        return -(qs + ra)


def _matvec(M, x):
    return np.sum(x[..., None, :] * M, axis=-1)


def angle_normalize(theta):
    return (theta + np.pi) % (2 * np.pi) - np.pi


class Pendulum(Env):
    """Torque-limited pendulum, upright at ``theta = 0``.

    Integrated with a discrete-gradient midpoint rule so that, with zero
    torque, the energy ``0.5*w^2 + k*cos(theta)`` never increases when
    ``damping >= 0``. ``theta`` is wrapped to ``[-pi, pi)`` after each step.
    """

    env_id = "pendulum"
    state_dim = 2
    action_dim = 1
    periodic_dims = (0,)
    dt = 0.05
    g = 10.0
    length = 1.0
    mass = 1.0
    max_torque = 2.0

    def __init__(self, horizon: int = 200, damping: float = 0.1, solver_iters: int = 30):
        super().__init__(horizon)
        self.damping = float(damping)
        self.k = 3.0 * self.g / (2.0 * self.length)
        self.torque_gain = 3.0 / (self.mass * self.length**2) * self.max_torque
        self.solver_iters = solver_iters

    def sample_initial(self, rng, n):
        return np.stack([rng.uniform(-np.pi, np.pi, n), rng.uniform(-1.0, 1.0, n)], axis=1)

    def energy(self, s):
        s = np.asarray(s)
        return 0.5 * s[..., 1] ** 2 + self.k * np.cos(s[..., 0])

    def _cos_slope(self, th0, th1):
        # (cos th1 - cos th0) / (th1 - th0) without cancellation
        half = 0.5 * (th1 - th0)
        return -np.sin(0.5 * (th0 + th1)) * np.sinc(half / np.pi)

    def dynamics(self, s, a):
        th = s[..., 0]
        w = s[..., 1]
        u = self.torque_gain * a[..., 0]
        dt, c, k = self.dt, self.damping, self.k
        th1 = th + dt * w
        w1 = w
        for _ in range(self.solver_iters):
            # p-update given th1, then th-update from the midpoint velocity
            slope = self._cos_slope(th, th1)
            w1 = (w * (1.0 - 0.5 * dt * c) - dt * k * slope + dt * u) / (1.0 + 0.5 * dt * c)
            th1 = th + dt * 0.5 * (w + w1)
        return np.stack([angle_normalize(th1), w1], axis=-1)

    def reward(self, s, a):
        ang = angle_normalize(s[..., 0])
        return -(ang**2 + 0.1 * s[..., 1] ** 2 + 0.001 * a[..., 0] ** 2)


class GateWalker(Env):
    """1-D locomotion toy: ``[x, v, h, hv]`` with a bumpy height channel.

    Action 0 drives forward, action 1 stabilises the height proxy ``h``;
    episodes terminate once ``h`` leaves ``[h_low, h_high]``.
    """

    env_id = "gatewalker"
    state_dim = 4
    action_dim = 2
    dt = 0.05
    h_low = 0.7
    h_high = 1.3

    def sample_initial(self, rng, n):
        return np.stack(
            [
                np.zeros(n),
                rng.uniform(-0.1, 0.1, n),
                1.0 + rng.uniform(-0.05, 0.05, n),
                rng.uniform(-0.1, 0.1, n),
            ],
            axis=1,
        )

    def dynamics(self, s, a):
        x, v, h, hv = (s[..., i] for i in range(4))
        dt = self.dt
        v1 = v + dt * (2.0 * a[..., 0] - 0.5 * v)
        hv1 = hv + dt * (-8.0 * (h - 1.0) - hv + 2.0 * a[..., 1] + 0.6 * v * np.sin(2.0 * x))
        return np.stack([x + dt * v1, v1, h + dt * hv1, hv1], axis=-1)

    def reward(self, s, a):
        return s[..., 1] - 0.001 * np.sum(a * a, axis=-1) + 1.0

    def terminal(self, s):
        h = s[..., 2]
        return (h < self.h_low) | (h > self.h_high)


ENVS = {cls.env_id: cls for cls in (PointMassLQR, Pendulum, GateWalker)}


def make_env(env_id: str, horizon: int = 200, **kwargs) -> Env:
    try:
        cls = ENVS[env_id]
    except KeyError:
        raise ValueError(f"unknown env id {env_id!r}; choose from {sorted(ENVS)}") from None
    return cls(horizon=horizon, **kwargs)


# functional surface ------------------------------------------------------

def env_reset(env: Env, seed) -> EnvState:
    return env.reset(seed)


def env_step(env: Env, state: EnvState, action):
    return env.step(state, action)


def reward_fn(env: Env, state, action):
    return env.reward(np.asarray(state, dtype=np.float64), np.asarray(action, dtype=np.float64))


def termination_fn(env: Env, state):
    return env.terminal(np.asarray(state, dtype=np.float64))


# LQR oracle --------------------------------------------------------------

class RiccatiError(RuntimeError):
    pass


def riccati_fixed_point(A, B, Q, R, gamma, tol=1e-10, max_iter=100_000):
    """Discounted DARE by value iteration; returns ``(P, K)`` with ``u = -K s``."""
    P = np.array(Q, dtype=np.float64, copy=True)
    for _ in range(max_iter):
        BtP = B.T @ P
        K = np.linalg.solve(R + gamma * BtP @ B, gamma * BtP @ A)
        P_new = Q + gamma * A.T @ P @ A - gamma * A.T @ P @ B @ K
        P_new = 0.5 * (P_new + P_new.T)
        if not np.all(np.isfinite(P_new)):
            raise RiccatiError("Riccati iteration diverged")
        if np.max(np.abs(P_new - P)) < tol:
            BtP = B.T @ P_new
            K = np.linalg.solve(R + gamma * BtP @ B, gamma * BtP @ A)
            return P_new, K
        P = P_new
    raise RiccatiError(f"Riccati iteration did not converge within {max_iter} iterations")


def riccati_finite_horizon(A, B, Q, R, horizon):
    """Backward recursion for the undiscounted ``horizon``-step problem.

    Returns the cost-to-go matrix at time 0 and the time-indexed gains.
    """
    P = np.zeros_like(Q, dtype=np.float64)
    gains = []
    for _ in range(horizon):
        BtP = B.T @ P
        K = np.linalg.solve(R + BtP @ B, BtP @ A)
        P = Q + A.T @ P @ A - A.T @ P @ B @ K
        P = 0.5 * (P + P.T)
        gains.append(K)
    return P, gains[::-1]


def oracle_optimal_return(env: PointMassLQR, gamma: float | None = 0.99, n_samples: int = 1000,
                          seed=0, horizon: int | None = None) -> float:
    """Optimal expected return from the reset distribution (actions unclipped).

    ``gamma`` in (0, 1) gives the infinite-horizon discounted value. With
    ``horizon`` set, gives the undiscounted optimum over that many steps.
    """
    if not isinstance(env, PointMassLQR):
        raise TypeError("the Riccati oracle is only defined for PointMassLQR")
    s0 = env.reset_batch(n_samples, seed)
    if horizon is not None:
        P, _ = riccati_finite_horizon(env.A, env.B, env.Q, env.R, horizon)
    else:
        P, _ = riccati_fixed_point(env.A, env.B, env.Q, env.R, gamma)
    return float(-np.mean(np.einsum("ni,ij,nj->n", s0, P, s0)))


class LinearPolicy:
    """``a = -K s`` controller, plus optional Gaussian noise when sampled."""

    def __init__(self, K, sigma: float = 0.1):
        self.K = np.asarray(K, dtype=np.float64)
        self.sigma = float(sigma)

    def mean_action(self, s):
        return -np.asarray(s) @ self.K.T

    def sample(self, s, rng):
        mean = self.mean_action(s)
        return mean + self.sigma * rng.standard_normal(np.shape(mean))


def lqr_gain(env: PointMassLQR, horizon: int | None = None, gamma: float = 0.99) -> np.ndarray:
    """Stationary feedback gain (first finite-horizon gain if ``horizon`` is set)."""
    if horizon is not None:
        return riccati_finite_horizon(env.A, env.B, env.Q, env.R, horizon)[1][0]
    return riccati_fixed_point(env.A, env.B, env.Q, env.R, gamma)[1]


def mediocre_policy(env: Env, scale: float = 0.3, sigma: float = 0.1) -> LinearPolicy:
    """A deliberately weak controller used as a behaviour policy for offline data."""
    if isinstance(env, PointMassLQR):
        return LinearPolicy(scale * lqr_gain(env, gamma=0.99), sigma)
    return LinearPolicy(np.zeros((env.action_dim, env.state_dim)), sigma)
