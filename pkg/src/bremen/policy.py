"""Gaussian tanh-mean policies and behaviour cloning."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import AdamState, Mlp, adam_step, init_mlp, mlp_backward, mlp_forward, read_mlp, write_mlp
from .dataset import Dataset, params_hash, split_train_val

LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class GaussianMlpPolicy:
    """``a = tanh(net(s)) + N(0, sigma^2)`` with a fixed, state-independent sigma."""

    net: Mlp
    sigma: np.ndarray

    def __post_init__(self):
        sigma = np.broadcast_to(np.asarray(self.sigma, dtype=np.float64), (self.net.out_dim,)).copy()
        if np.any(sigma <= 0) or not np.all(np.isfinite(sigma)):
            raise ValueError(f"sigma must be positive, got {sigma}")
        object.__setattr__(self, "sigma", sigma)

    @property
    def action_dim(self) -> int:
        return self.net.out_dim

    def mean_action(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        out = np.tanh(mlp_forward(self.net, np.atleast_2d(s)))
        return out[0] if s.ndim == 1 else out

    def sample(self, s, rng) -> np.ndarray:
        return act(self, s, rng)[0]

    def log_prob(self, s, a) -> np.ndarray:
        return gaussian_log_prob(a, self.mean_action(s), self.sigma)

    def with_params(self, flat) -> "GaussianMlpPolicy":
        return GaussianMlpPolicy(self.net.with_flat(flat), self.sigma)

    def param_hash(self) -> str:
        return params_hash(np.concatenate([self.net.flat, self.sigma]))


def gaussian_log_prob(a, mean, sigma) -> np.ndarray:
    z = (a - mean) / sigma
    return np.sum(-0.5 * z * z - np.log(sigma) - LOG_SQRT_2PI, axis=-1)


POLICY_OUT_SCALE = 0.01


def random_policy(state_dim: int, action_dim: int, hidden, sigma, rng,
                  out_scale: float = POLICY_OUT_SCALE) -> GaussianMlpPolicy:
    """Fresh policy; the small output layer keeps the initial mean action near 0."""
    return GaussianMlpPolicy(init_mlp((state_dim, *hidden, action_dim), rng, out_scale), sigma)


def act(policy: GaussianMlpPolicy, s, rng: np.random.Generator):
    """Sample a pre-clip action and its log-density; works on single states or batches."""
    mean = policy.mean_action(s)
    noise = rng.standard_normal(mean.shape)
    a = mean + policy.sigma * noise
    logp = np.sum(-0.5 * noise * noise - np.log(policy.sigma) - LOG_SQRT_2PI, axis=-1)
    return a, logp


def mean_kl(pa: GaussianMlpPolicy, pb: GaussianMlpPolicy, states) -> float:
    """Average over ``states`` of KL(pa(.|s) || pb(.|s)) for the pre-clip Gaussians."""
    if pa.action_dim != pb.action_dim:
        raise ValueError("action dims differ")
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    return float(np.mean(per_state_kl(pa.mean_action(states), pa.sigma,
                                      pb.mean_action(states), pb.sigma)))


def per_state_kl(mu_a, sig_a, mu_b, sig_b) -> np.ndarray:
    return np.sum(
        np.log(sig_b / sig_a) + (sig_a**2 + (mu_a - mu_b) ** 2) / (2.0 * sig_b**2) - 0.5,
        axis=-1,
    )


def init_target_policy(bc_net: Mlp, sigma_init) -> GaussianMlpPolicy:
    if np.any(np.asarray(sigma_init) <= 0):
        raise ValueError(f"sigma_init must be > 0, got {sigma_init}")
    return GaussianMlpPolicy(bc_net.copy(), sigma_init)


# -- behaviour cloning -----------------------------------------------------

@dataclass
class BcReport:
    loss: float
    epochs: int
    val_mse: float
    loss_curve: list


def bc_loss_and_grad(net: Mlp, s: np.ndarray, a: np.ndarray, grad: bool = True):
    """Mean of 0.5*||a - tanh(net(s))||^2 and its parameter gradient."""
    out, cache = mlp_forward(net, s, return_cache=True)
    m = np.tanh(out)
    err = m - a
    loss = 0.5 * float(np.mean(np.sum(err * err, axis=1)))
    if not grad:
        return loss, None
    up = err * (1.0 - m * m) / s.shape[0]
    return loss, mlp_backward(net, s, up, cache)


def behavior_clone(d: Dataset, hidden=(64, 64), lr=5e-4, batch_size: int | None = 256,
                   max_epochs=200, patience=10, seed=0, init: Mlp | None = None):
    """Regress dataset actions onto states through a tanh output.

    ``batch_size=None`` selects full-batch mode: every epoch is one Adam step
    on the whole dataset, with no validation split and no early stopping.
    """
    if len(d) == 0:
        raise ValueError("behaviour cloning needs a non-empty dataset")
    rng = np.random.default_rng(seed)
    net = init if init is not None else init_mlp((d.state_dim, *hidden, d.action_dim), rng)
    net = net.copy()
    opt = AdamState.zeros(net.n_params, lr)

    if batch_size is None:
        s, a = d.s, d.a
        flat = net.flat
        loss0, _ = bc_loss_and_grad(net, s, a, grad=False)
        curve = []
        for epoch in range(max_epochs):
            loss, g = bc_loss_and_grad(net.view(flat), s, a)
            _check_divergence(loss, loss0)
            curve.append(loss)
            flat, opt = adam_step(opt, flat, g)
        net = net.with_flat(flat)
        final, _ = bc_loss_and_grad(net, s, a, grad=False)
        return net, BcReport(final, max_epochs, 2.0 * final / d.action_dim, curve)

    if len(d) >= 3:
        train, val = split_train_val(d, (2, 1), seed=rng.integers(2**63))
    else:
        train, val = d, d
    s, a = train.s, train.a
    loss0, _ = bc_loss_and_grad(net, s, a, grad=False)
    best = (np.inf, net.flat.copy(), 0)
    flat = net.flat.copy()
    curve = []
    bad = 0
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        perm = rng.permutation(len(s))
        for i in range(0, len(s), batch_size):
            idx = perm[i:i + batch_size]
            _, g = bc_loss_and_grad(net.view(flat), s[idx], a[idx])
            flat, opt = adam_step(opt, flat, g)
        cur = net.view(flat)
        loss, _ = bc_loss_and_grad(cur, s, a, grad=False)
        _check_divergence(loss, loss0)
        curve.append(loss)
        val_mse = action_mse(cur, val.s, val.a)
        if val_mse < best[0]:
            best = (val_mse, flat.copy(), epoch)
            bad = 0
        else:
            bad += 1
            if bad >= patience:
                break
    net = net.with_flat(best[1])
    final, _ = bc_loss_and_grad(net, d.s, d.a, grad=False)
    return net, BcReport(final, epoch, float(best[0]), curve)


def action_mse(net: Mlp, s, a) -> float:
    return float(np.mean((np.tanh(mlp_forward(net, s)) - a) ** 2))


def _check_divergence(loss, loss0):
    if not np.isfinite(loss) or loss > 10.0 * max(loss0, 1e-12):
        raise TrainingError(f"behaviour cloning diverged (loss {loss:.4g}, initial {loss0:.4g})")


# -- checkpoints -----------------------------------------------------------

def save_policy(path, policy: GaussianMlpPolicy) -> None:
    with open(path, "wb") as fh:
        write_mlp(fh, policy.net)
        fh.write(struct.pack("<I", policy.sigma.size))
        fh.write(policy.sigma.astype("<f8").tobytes())


def load_policy(path) -> GaussianMlpPolicy:
    from .autodiff import CheckpointError

    with open(path, "rb") as fh:
        net = read_mlp(fh)
        raw = fh.read(4)
        if len(raw) != 4:
            raise CheckpointError("truncated policy checkpoint (sigma block)")
        (n,) = struct.unpack("<I", raw)
        buf = fh.read(8 * n)
        if len(buf) != 8 * n:
            raise CheckpointError("truncated policy checkpoint (sigma values)")
    return GaussianMlpPolicy(net, np.frombuffer(buf, "<f8").astype(np.float64))
