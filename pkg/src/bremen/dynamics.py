"""Deterministic dynamics-model ensemble and imagined rollouts."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (AdamState, CheckpointError, Mlp, adam_step, init_mlp, mlp_backward,
                       mlp_forward, read_mlp, write_mlp)
from .dataset import Dataset, split_train_val
from .policy import TrainingError

STD_FLOOR = 1e-6


def wrap_periodic(x, mask) -> np.ndarray:
    """Map the masked coordinates of ``x`` into [-pi, pi)."""
    if mask is None or not np.any(mask):
        return x
    return np.where(mask, (x + np.pi) % (2 * np.pi) - np.pi, x)


def periodic_mask(state_dim: int, dims) -> np.ndarray:
    mask = np.zeros(state_dim, dtype=bool)
    mask[list(dims)] = True
    return mask


@dataclass
class EnsembleConfig:
    k: int = 5
    hidden: tuple = (128, 128)
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 5
    val_ratio: tuple = (2, 1)
    min_rel_improvement: float = 0.01
    # state coordinates that are angles in [-pi, pi): deltas are taken modulo 2 pi
    periodic_dims: tuple = ()


@dataclass
class DynamicsEnsemble:
    """K MLPs mapping normalised ``(s, a)`` to normalised state deltas.

    All members share one normaliser fitted on the training data.
    """

    members: list
    in_mean: np.ndarray
    in_std: np.ndarray
    delta_std: np.ndarray
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    periodic: np.ndarray | None = None

    def __post_init__(self):
        if len(self.members) < 1:
            raise ValueError("ensemble needs at least one member")
        n_s = np.asarray(self.delta_std).size
        self.periodic = (np.zeros(n_s, dtype=bool) if self.periodic is None
                         else np.asarray(self.periodic, dtype=bool).reshape(n_s))
        self.in_std = np.maximum(np.asarray(self.in_std, dtype=np.float64), STD_FLOOR)
        self.delta_std = np.maximum(np.asarray(self.delta_std, dtype=np.float64), STD_FLOOR)
        self.in_mean = np.asarray(self.in_mean, dtype=np.float64)

    @property
    def k(self) -> int:
        return len(self.members)

    @property
    def state_dim(self) -> int:
        return self.delta_std.size

    def normalize_inputs(self, s, a) -> np.ndarray:
        return (np.concatenate([s, a], axis=-1) - self.in_mean) / self.in_std

    def predict(self, member: int, s, a) -> np.ndarray:
        if not 0 <= member < self.k:
            raise IndexError(f"member index {member} out of range for K={self.k}")
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        out = mlp_forward(self.members[member], self.normalize_inputs(s, a))
        return wrap_periodic(s + out * self.delta_std, self.periodic)

    def state_delta(self, s, s_next) -> np.ndarray:
        return wrap_periodic(np.asarray(s_next) - np.asarray(s), self.periodic)


def predict_next(ens: DynamicsEnsemble, member_index: int, s, a) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    out = ens.predict(member_index, s, a)
    return out[0] if s.ndim == 1 else out


def prediction_error(ens, member: int, s, a, s_next) -> np.ndarray:
    """Predicted minus observed next state, wrapped on periodic coordinates."""
    return wrap_periodic(ens.predict(member, s, a) - s_next, getattr(ens, "periodic", None))


def one_step_mse(ens: DynamicsEnsemble, member: int, s, a, s_next) -> float:
    """Mean squared error per state coordinate, in raw state units."""
    return float(np.mean(prediction_error(ens, member, s, a, s_next) ** 2))


def _member_loss_grad(net: Mlp, x, y):
    out, cache = mlp_forward(net, x, return_cache=True)
    err = out - y
    loss = 0.5 * float(np.mean(np.sum(err * err, axis=1)))
    return loss, mlp_backward(net, x, err / x.shape[0], cache)


def train_ensemble(d_all: Dataset, cfg: EnsembleConfig = EnsembleConfig(), seed=0,
                   init: DynamicsEnsemble | None = None) -> DynamicsEnsemble:
    """Fit K members by Adam with early stopping on a held-out split.

    Each member gets its own initialisation and epoch orderings (from a
    per-member seed stream). ``init`` warm-starts the member weights; the
    normaliser is always refitted on the current training split.
    """
    if len(d_all) < 10 * cfg.k:
        raise ValueError(f"need at least {10 * cfg.k} transitions for K={cfg.k}, got {len(d_all)}")
    ss = np.random.SeedSequence(seed)
    split_seed, *member_seeds = ss.generate_state(cfg.k + 1)
    train, val = split_train_val(d_all, cfg.val_ratio, seed=int(split_seed))
    xs = np.concatenate([train.s, train.a], axis=1)
    in_mean = xs.mean(axis=0)
    in_std = np.maximum(xs.std(axis=0), STD_FLOOR)
    mask = periodic_mask(d_all.state_dim, cfg.periodic_dims)
    delta_std = np.maximum(wrap_periodic(train.s_next - train.s, mask).std(axis=0), STD_FLOOR)
    proto = DynamicsEnsemble([None] * cfg.k, in_mean, in_std, delta_std, periodic=mask)

    x_tr = proto.normalize_inputs(train.s, train.a)
    y_tr = proto.state_delta(train.s, train.s_next) / proto.delta_std
    x_va = proto.normalize_inputs(val.s, val.a)
    y_va = proto.state_delta(val.s, val.s_next) / proto.delta_std

    members, train_mse, val_mse = [], [], []
    sizes = (d_all.state_dim + d_all.action_dim, *cfg.hidden, d_all.state_dim)
    for i in range(cfg.k):
        rng = np.random.default_rng(member_seeds[i])
        if init is not None and i < init.k and init.members[i].sizes == sizes:
            net = init.members[i].copy()
        else:
            net = init_mlp(sizes, rng)
        members.append(_fit_member(net, x_tr, y_tr, x_va, y_va, cfg, rng, i))
    ens = DynamicsEnsemble(members, in_mean, in_std, delta_std, periodic=mask)
    for i in range(cfg.k):
        train_mse.append(one_step_mse(ens, i, train.s, train.a, train.s_next))
        val_mse.append(one_step_mse(ens, i, val.s, val.a, val.s_next))
    ens.train_mse, ens.val_mse = train_mse, val_mse
    return ens


def _fit_member(net, x_tr, y_tr, x_va, y_va, cfg, rng, index) -> Mlp:
    opt = AdamState.zeros(net.n_params, cfg.lr)
    flat = net.flat.copy()

    def val_loss(f):
        err = mlp_forward(net.view(f), x_va) - y_va
        return float(np.mean(err * err))

    best_loss, best_flat = val_loss(flat), flat.copy()
    bad = 0
    n = x_tr.shape[0]
    for epoch in range(cfg.max_epochs):
        perm = rng.permutation(n)
        for j in range(0, n, cfg.batch_size):
            idx = perm[j:j + cfg.batch_size]
            loss, g = _member_loss_grad(net.view(flat), x_tr[idx], y_tr[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"dynamics member {index}: non-finite loss in epoch {epoch}")
            flat, opt = adam_step(opt, flat, g)
        cur = val_loss(flat)
        if not math.isfinite(cur):
            raise TrainingError(f"dynamics member {index}: non-finite validation loss")
        if cur < best_loss:
            # only a relative gain of min_rel_improvement resets patience
            if cur < best_loss * (1.0 - cfg.min_rel_improvement):
                bad = 0
            else:
                bad += 1
            best_loss, best_flat = cur, flat.copy()
            if bad >= cfg.patience:
                break
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    return net.with_flat(best_flat)


# -- imagined rollouts -----------------------------------------------------

@dataclass
class RolloutBatch:
    """Flat, trajectory-contiguous storage of imagined steps.

    ``actions`` are the pre-clip policy samples (what ``log_probs`` and
    ``means`` refer to). ``ends`` flags the last step of each branch;
    ``terminals`` flags steps whose successor satisfied the termination
    predicate.
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    terminals: np.ndarray
    ends: np.ndarray
    timesteps: np.ndarray
    model_idx: np.ndarray
    log_probs: np.ndarray
    means: np.ndarray
    n_incidents: int = 0

    def __len__(self):
        return self.rewards.size

    @property
    def traj_starts(self) -> np.ndarray:
        return np.flatnonzero(np.concatenate([[True], self.ends[:-1]]))

    def trajectory_returns(self, gamma: float = 1.0) -> np.ndarray:
        starts = self.traj_starts
        stops = np.append(starts[1:], len(self))
        out = []
        for a, b in zip(starts, stops):
            out.append(np.sum(self.rewards[a:b] * gamma ** np.arange(b - a)))
        return np.array(out)


def imaginary_rollout(ens, policy, start_pool: np.ndarray, length: int, env,
                      rng: np.random.Generator, min_steps: int = 5000) -> RolloutBatch:
    """Imagined branches of at most ``length`` steps until ``min_steps`` are collected.

    Start states are drawn uniformly from ``start_pool``. At every step each
    branch independently picks one member uniformly at random. Rewards and
    terminations come from ``env.reward``/``env.terminal`` only.
    ``ens`` needs ``k`` and ``predict(member, s, a)``.
    """
    if length < 1:
        raise ValueError("rollout length must be >= 1")
    start_pool = np.atleast_2d(np.asarray(start_pool, dtype=np.float64))
    waves = []
    total = 0
    incidents = 0
    branch_offset = 0
    empty_waves = 0
    while total < min_steps:
        n = max(1, math.ceil((min_steps - total) / length))
        wave, n_inc = _rollout_wave(ens, policy, start_pool[rng.integers(len(start_pool), size=n)],
                                    length, env, rng, branch_offset)
        incidents += n_inc
        branch_offset += n
        if wave is None:
            empty_waves += 1
            if empty_waves >= 10:
                raise TrainingError("imagined rollouts keep producing non-finite states")
            continue
        waves.append(wave)
        total += wave["rewards"].size
    cols = {k: np.concatenate([w[k] for w in waves]) for k in waves[0]}
    order = np.lexsort((cols["timesteps"], cols["branch"]))
    cols = {k: v[order] for k, v in cols.items()}
    branch = cols.pop("branch")
    ends = np.ones(branch.size, dtype=bool)
    ends[:-1] = branch[1:] != branch[:-1]
    return RolloutBatch(ends=ends, n_incidents=incidents, **cols)


def _rollout_wave(ens, policy, s0, length, env, rng, branch_offset):
    n = s0.shape[0]
    s = s0.copy()
    alive = np.arange(n)
    rec = {k: [] for k in ("obs", "actions", "rewards", "next_obs", "terminals", "timesteps",
                           "model_idx", "log_probs", "means", "branch")}
    incidents = 0
    for t in range(length):
        if alive.size == 0:
            break
        mean = policy.mean_action(s)
        noise = rng.standard_normal(mean.shape)
        a_pre = mean + policy.sigma * noise
        logp = np.sum(-0.5 * noise * noise - np.log(policy.sigma) - 0.5 * np.log(2 * np.pi), axis=-1)
        a = env.clip_action(a_pre)
        r = env.reward(s, a)
        idx = rng.integers(ens.k, size=alive.size)
        s_next = np.empty_like(s)
        for m in range(ens.k):
            rows = idx == m
            if rows.any():
                s_next[rows] = ens.predict(m, s[rows], a[rows])
        ok = np.all(np.isfinite(s_next), axis=1) & np.isfinite(r)
        incidents += int(np.count_nonzero(~ok))
        term = np.zeros(alive.size, bool)
        term[ok] = env.terminal(s_next[ok])
        for key, val in (("obs", s), ("actions", a_pre), ("rewards", r), ("next_obs", s_next),
                         ("terminals", term), ("model_idx", idx), ("log_probs", logp),
                         ("means", mean)):
            rec[key].append(val[ok])
        rec["timesteps"].append(np.full(int(ok.sum()), t))
        rec["branch"].append(alive[ok] + branch_offset)
        keep = ok & ~term
        s = s_next[keep]
        alive = alive[keep]
    if sum(x.size for x in rec["rewards"]) == 0:
        return None, incidents
    return {k: np.concatenate(v) for k, v in rec.items()}, incidents


# -- checkpoints -----------------------------------------------------------

def save_ensemble(path, ens: DynamicsEnsemble) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", ens.k))
        for m in ens.members:
            write_mlp(fh, m)
        fh.write(struct.pack("<II", ens.in_mean.size, ens.delta_std.size))
        for arr in (ens.in_mean, ens.in_std, ens.delta_std):
            fh.write(arr.astype("<f8").tobytes())
        fh.write(ens.periodic.astype("u1").tobytes())


def load_ensemble(path) -> DynamicsEnsemble:
    with open(path, "rb") as fh:
        raw = fh.read(4)
        if len(raw) != 4:
            raise CheckpointError("truncated ensemble checkpoint")
        (k,) = struct.unpack("<I", raw)
        members = [read_mlp(fh) for _ in range(k)]
        raw = fh.read(8)
        if len(raw) != 8:
            raise CheckpointError("truncated ensemble normaliser block")
        n_in, n_s = struct.unpack("<II", raw)
        buf = fh.read(8 * (2 * n_in + n_s))
        if len(buf) != 8 * (2 * n_in + n_s):
            raise CheckpointError("truncated ensemble normaliser values")
        mask = fh.read(n_s)
        if len(mask) != n_s:
            raise CheckpointError("truncated ensemble periodic mask")
    vals = np.frombuffer(buf, "<f8").astype(np.float64)
    return DynamicsEnsemble(members, vals[:n_in], vals[n_in:2 * n_in], vals[2 * n_in:],
                            periodic=np.frombuffer(mask, "u1").astype(bool))
