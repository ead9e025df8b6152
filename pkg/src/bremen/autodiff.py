"""Small dense MLPs with hand-written reverse- and forward-mode derivatives.

Parameters live in one flat float64 vector. Layer ``l`` contributes its
weight matrix (``in x out``, row-major) followed by its bias, so gradients,
Adam moments and JVP tangents all share the same indexing.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

MAGIC = b"BRMN"
VERSION = 1


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class Mlp:
    """tanh hidden layers, identity output layer."""

    sizes: tuple[int, ...]
    flat: np.ndarray
    _slices: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ShapeError(f"invalid layer sizes {self.sizes}")
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        if self.flat.shape != (param_count(self.sizes),):
            raise ShapeError(
                f"expected {param_count(self.sizes)} parameters, got {self.flat.shape}"
            )
        slices = []
        off = 0
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            w = (off, off + n_in * n_out, (n_in, n_out))
            off += n_in * n_out
            b = (off, off + n_out)
            off += n_out
            slices.append((w, b))
        self._slices = slices

    @property
    def n_params(self) -> int:
        return self.flat.size

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def layers(self, flat: np.ndarray | None = None):
        """(W, b) views into ``flat`` (defaults to the own parameters)."""
        v = self.flat if flat is None else flat
        return [
            (v[w0:w1].reshape(shape), v[b0:b1])
            for (w0, w1, shape), (b0, b1) in self._slices
        ]

    def with_flat(self, flat: np.ndarray) -> "Mlp":
        return Mlp(self.sizes, np.array(flat, dtype=np.float64, copy=True))

    def view(self, flat: np.ndarray) -> "Mlp":
        """Same architecture over ``flat`` without copying it."""
        return Mlp(self.sizes, flat)

    def copy(self) -> "Mlp":
        return self.with_flat(self.flat)


def param_count(sizes: Sequence[int]) -> int:
    return sum(i * o + o for i, o in zip(sizes[:-1], sizes[1:]))


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, out_scale: float = 1.0) -> Mlp:
    """Glorot-uniform weights (last layer times ``out_scale``), zero biases."""
    sizes = tuple(int(s) for s in sizes)
    parts = []
    n_layers = len(sizes) - 1
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = np.sqrt(6.0 / (n_in + n_out)) * (out_scale if k == n_layers - 1 else 1.0)
        parts.append(rng.uniform(-lim, lim, size=n_in * n_out))
        parts.append(np.zeros(n_out))
    return Mlp(sizes, np.concatenate(parts))


def zero_mlp(sizes: Sequence[int]) -> Mlp:
    return Mlp(tuple(sizes), np.zeros(param_count(sizes)))


def _check_input(params: Mlp, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"input shape {x.shape} incompatible with in_dim {params.in_dim}")
    return x


def mlp_forward(params: Mlp, x: np.ndarray, return_cache: bool = False):
    """Batch forward pass. With ``return_cache`` also returns layer inputs."""
    h = _check_input(params, x)
    layers = params.layers()
    cache = [h]
    for l, (w, b) in enumerate(layers):
        z = h @ w + b
        if l < len(layers) - 1:
            h = np.tanh(z)
            cache.append(h)
        else:
            h = z
    if return_cache:
        return h, cache
    return h


def mlp_backward(params: Mlp, x: np.ndarray, upstream: np.ndarray, cache=None) -> np.ndarray:
    """Gradient of sum(output * upstream) w.r.t. the flat parameters."""
    if cache is None:
        out, cache = mlp_forward(params, x, return_cache=True)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (cache[0].shape[0], params.out_dim):
        raise ShapeError(
            f"upstream shape {upstream.shape} does not match output "
            f"({cache[0].shape[0]}, {params.out_dim})"
        )
    grad = np.empty(params.n_params)
    glayers = params.layers(grad)
    layers = params.layers()
    g = upstream
    for l in range(len(layers) - 1, -1, -1):
        gw, gb = glayers[l]
        gw[...] = cache[l].T @ g
        gb[...] = g.sum(axis=0)
        if l > 0:
            g = (g @ layers[l][0].T) * (1.0 - cache[l] ** 2)
    return grad


def jacobian_vector_product(params: Mlp, x: np.ndarray, tangent: np.ndarray, cache=None) -> np.ndarray:
    """Forward-mode J @ tangent for every row of the batch.

    ``cache`` (layer inputs from ``mlp_forward``) skips recomputing activations.
    """
    tangent = np.asarray(tangent, dtype=np.float64)
    if tangent.shape != (params.n_params,):
        raise ShapeError(f"tangent length {tangent.shape} != {params.n_params}")
    if cache is None:
        _, cache = mlp_forward(params, x, return_cache=True)
    layers = params.layers()
    tlayers = params.layers(tangent)
    dh = None
    for l, ((w, _), (dw, db)) in enumerate(zip(layers, tlayers)):
        h = cache[l]
        dz = h @ dw + db if dh is None else dh @ w + h @ dw + db
        if l < len(layers) - 1:
            nxt = cache[l + 1]
            dh = dz * (1.0 - nxt * nxt)
        else:
            dh = dz
    return dh


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if not (params.shape == grad.shape == state.m.shape):
        raise ShapeError(
            f"adam: params {params.shape}, grad {grad.shape}, state {state.m.shape}"
        )
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad))
        raise FloatingPointError(
            f"adam: non-finite gradient at {bad.size} entries (first index {bad[0]})"
        )
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)


# -- checkpoints -------------------------------------------------------------

def write_mlp(fh: BinaryIO, params: Mlp) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(params.sizes)))
    fh.write(struct.pack(f"<{len(params.sizes)}I", *params.sizes))
    fh.write(params.flat.astype("<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def read_mlp(fh: BinaryIO) -> Mlp:
    magic = _read_exact(fh, 4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, n_sizes = struct.unpack("<II", _read_exact(fh, 8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if not 2 <= n_sizes <= 64:
        raise CheckpointError(f"implausible layer count {n_sizes}")
    sizes = struct.unpack(f"<{n_sizes}I", _read_exact(fh, 4 * n_sizes, "layer dims"))
    n = param_count(sizes)
    flat = np.frombuffer(_read_exact(fh, 8 * n, "parameters"), dtype="<f8").astype(np.float64)
    return Mlp(sizes, flat)


def save_mlp(path, params: Mlp) -> None:
    with open(path, "wb") as fh:
        write_mlp(fh, params)


def load_mlp(path) -> Mlp:
    with open(path, "rb") as fh:
        return read_mlp(fh)


def mlp_to_bytes(params: Mlp) -> bytes:
    buf = io.BytesIO()
    write_mlp(buf, params)
    return buf.getvalue()
