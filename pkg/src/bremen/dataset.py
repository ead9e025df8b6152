"""Transition datasets: accumulation, splitting, persistence, noisy synthesis."""
from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"BRDS"
VERSION = 1
NOISE_SCHEMES = ("eps1", "eps3", "gaussian1", "gaussian3", "random")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool
    deployment_index: int


@dataclass
class Dataset:
    """Columnar transition store. Arrays are made read-only on construction."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    deployment_index: np.ndarray
    env_id: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.s = _frozen(self.s, np.float64, 2)
        self.a = _frozen(self.a, np.float64, 2)
        self.r = _frozen(self.r, np.float64, 1)
        self.s_next = _frozen(self.s_next, np.float64, 2)
        self.done = _frozen(self.done, bool, 1)
        self.deployment_index = _frozen(self.deployment_index, np.int64, 1)
        n = self.s.shape[0]
        if not (self.a.shape[0] == self.r.shape[0] == self.s_next.shape[0]
                == self.done.shape[0] == self.deployment_index.shape[0] == n):
            raise DatasetError("column lengths differ")
        if self.s_next.shape[1] != self.s.shape[1]:
            raise DatasetError("s and s_next dims differ")
        if not np.all(np.isfinite(self.r)):
            raise DatasetError("non-finite reward")

    def __len__(self):
        return self.s.shape[0]

    def __getitem__(self, i) -> Transition:
        return Transition(self.s[i], self.a[i], float(self.r[i]), self.s_next[i],
                          bool(self.done[i]), int(self.deployment_index[i]))

    @property
    def state_dim(self) -> int:
        return self.s.shape[1]

    @property
    def action_dim(self) -> int:
        return self.a.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx],
                       self.done[idx], self.deployment_index[idx], self.env_id,
                       dict(self.metadata))

    def equals(self, other: "Dataset") -> bool:
        return (
            self.env_id == other.env_id
            and self.metadata == other.metadata
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("s", "a", "r", "s_next", "done", "deployment_index")
            )
        )

    @classmethod
    def empty(cls, state_dim: int, action_dim: int, env_id: str = "") -> "Dataset":
        return cls(np.zeros((0, state_dim)), np.zeros((0, action_dim)), np.zeros(0),
                   np.zeros((0, state_dim)), np.zeros(0, bool), np.zeros(0, np.int64), env_id)


def _frozen(x, dtype, ndim):
    arr = np.array(x, dtype=dtype, copy=True)
    if arr.ndim != ndim:
        raise DatasetError(f"expected {ndim}-d column, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def concatenate(parts: list[Dataset], metadata: dict | None = None) -> Dataset:
    if not parts:
        raise DatasetError("nothing to concatenate")
    first = parts[0]
    for p in parts[1:]:
        if p.state_dim != first.state_dim or p.action_dim != first.action_dim:
            raise DatasetError("dimension mismatch between datasets")
    return Dataset(
        np.concatenate([p.s for p in parts]),
        np.concatenate([p.a for p in parts]),
        np.concatenate([p.r for p in parts]),
        np.concatenate([p.s_next for p in parts]),
        np.concatenate([p.done for p in parts]),
        np.concatenate([p.deployment_index for p in parts]),
        first.env_id,
        dict(first.metadata) if metadata is None else metadata,
    )


def append_batch(d_all: Dataset, batch: Dataset) -> tuple[Dataset, Dataset]:
    """Return ``(D_all + batch, batch)``."""
    if len(batch) == 0:
        raise DatasetError("cannot append an empty batch")
    if len(d_all) and (batch.state_dim != d_all.state_dim or batch.action_dim != d_all.action_dim):
        raise DatasetError(
            f"batch dims ({batch.state_dim}, {batch.action_dim}) do not match "
            f"D_all ({d_all.state_dim}, {d_all.action_dim})"
        )
    if len(d_all) and batch.deployment_index.min() < d_all.deployment_index.max():
        raise DatasetError("deployment_index must be non-decreasing")
    meta = dict(d_all.metadata)
    meta.setdefault("batches", [])
    meta["batches"] = list(meta["batches"]) + [batch.metadata]
    merged = concatenate([d_all, batch] if len(d_all) else [batch], metadata=meta)
    return merged, batch


def split_train_val(d: Dataset, ratio=(2, 1), seed=0) -> tuple[Dataset, Dataset]:
    n = len(d)
    if n < 3:
        raise DatasetError(f"need at least 3 transitions to split, got {n}")
    a, b = ratio
    n_train = min(max(math.ceil(n * a / (a + b)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    return d.subset(np.sort(perm[:n_train])), d.subset(np.sort(perm[n_train:]))


# -- persistence -----------------------------------------------------------

def save(d: Dataset, path) -> None:
    meta = json.dumps({"env_id": d.env_id, "metadata": d.metadata}, sort_keys=True).encode()
    n, S, A = len(d), d.state_dim, d.action_dim
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIIQI", VERSION, S, A, n, len(meta)))
        fh.write(meta)
        for col in (d.s, d.a, d.r, d.s_next, d.done.astype(np.float64)):
            fh.write(np.ascontiguousarray(col, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(d.deployment_index, dtype="<i8").tobytes())


def load(path) -> Dataset:
    raw = Path(path).read_bytes()
    head = struct.calcsize("<IIIQI")
    if len(raw) < 4 + head:
        raise DatasetError("truncated dataset header")
    if raw[:4] != MAGIC:
        raise DatasetError(f"bad magic {raw[:4]!r}")
    version, S, A, n, meta_len = struct.unpack_from("<IIIQI", raw, 4)
    if version != VERSION:
        raise DatasetError(f"unsupported dataset version {version}")
    off = 4 + head
    expected = off + meta_len + 8 * n * (2 * S + A + 2) + 8 * n
    if len(raw) != expected:
        raise DatasetError(f"dataset file has {len(raw)} bytes, expected {expected} (truncated?)")
    meta = json.loads(raw[off:off + meta_len].decode())
    off += meta_len

    def take(count, dtype):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += 8 * count
        return arr

    s = take(n * S, "<f8").reshape(n, S)
    a = take(n * A, "<f8").reshape(n, A)
    r = take(n, "<f8")
    s_next = take(n * S, "<f8").reshape(n, S)
    done = take(n, "<f8") != 0.0
    dep = take(n, "<i8")
    return Dataset(s, a, r, s_next, done, dep, meta["env_id"], meta["metadata"])


def export_jsonl(d: Dataset, path) -> None:
    with open(path, "w") as fh:
        for i in range(len(d)):
            t = d[i]
            fh.write(json.dumps({
                "s": t.s.tolist(), "a": t.a.tolist(), "r": t.r,
                "s_next": t.s_next.tolist(), "done": t.done,
                "deployment_index": t.deployment_index,
            }) + "\n")


def default_data_dir() -> Path:
    return Path(os.environ.get("BREMEN_DATA_DIR", "data"))


# -- collection ------------------------------------------------------------

def params_hash(flat: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(flat, dtype="<f8").tobytes()).hexdigest()[:16]


def collect(env, action_fn, n: int, rng: np.random.Generator, deployment_index: int = 0,
            metadata: dict | None = None) -> Dataset:
    """Run episodes with ``action_fn(s, rng, t) -> action`` until ``n`` transitions.

    Stored actions are the clipped actions the environment actually executed.
    """
    S, A = env.state_dim, env.action_dim
    s_buf = np.empty((n, S))
    a_buf = np.empty((n, A))
    r_buf = np.empty(n)
    sn_buf = np.empty((n, S))
    d_buf = np.empty(n, bool)
    state = env.reset(rng.integers(2**63))
    for t in range(n):
        a = env.clip_action(np.asarray(action_fn(state.state, rng, t), dtype=np.float64))
        nxt, r, done = env.step(state, a)
        s_buf[t], a_buf[t], r_buf[t], sn_buf[t], d_buf[t] = state.state, a, r, nxt.state, done
        state = env.reset(rng.integers(2**63)) if done else nxt
    return Dataset(s_buf, a_buf, r_buf, sn_buf, d_buf, np.full(n, deployment_index),
                   env.env_id, dict(metadata or {}))


def synthesize_noisy_dataset(env, behavior_policy, scheme: str, size: int, seed=0) -> Dataset:
    """Mixed-quality offline dataset in contiguous segments.

    ``eps*``/``gaussian*``: 40% behaviour policy, 40% perturbed behaviour
    policy, 20% uniform random; ``random``: all uniform. ``behavior_policy``
    needs ``sample(s, rng)`` (stochastic action) and ``mean_action(s)``.
    """
    if scheme not in NOISE_SCHEMES:
        raise DatasetError(f"unknown noise scheme {scheme!r}; choose from {NOISE_SCHEMES}")
    rng = np.random.default_rng(seed)
    A = env.action_dim
    lo, hi = env.spec.action_low, env.spec.action_high

    def uniform(s, rng, t):
        return rng.uniform(lo, hi, A)

    def behave(s, rng, t):
        return behavior_policy.sample(s, rng)

    def eps_greedy(eps):
        def fn(s, rng, t):
            if rng.random() < eps:
                return rng.uniform(lo, hi, A)
            return behavior_policy.sample(s, rng)
        return fn

    def gaussian(std):
        def fn(s, rng, t):
            return behavior_policy.mean_action(s) + rng.normal(0.0, std, A)
        return fn

    if scheme == "random":
        segments = [("uniform", uniform, size)]
    else:
        n_b = int(round(0.4 * size))
        n_noisy = int(round(0.4 * size))
        noisy = {"eps1": eps_greedy(0.1), "eps3": eps_greedy(0.3),
                 "gaussian1": gaussian(0.1), "gaussian3": gaussian(0.3)}[scheme]
        segments = [("behavior", behave, n_b), (scheme, noisy, n_noisy),
                    ("uniform", uniform, size - n_b - n_noisy)]
    parts = []
    for name, fn, count in segments:
        if count > 0:
            parts.append(collect(env, fn, count, rng))
    seg_meta = [{"source": name, "count": count} for name, _, count in segments]
    return concatenate(parts, metadata={"seed": seed, "noise_scheme": scheme, "segments": seg_meta})
