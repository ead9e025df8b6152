import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bremen.autodiff import (AdamState, CheckpointError, Mlp, ShapeError, adam_step, init_mlp,
                             jacobian_vector_product, mlp_backward, mlp_forward, mlp_to_bytes,
                             param_count, read_mlp, write_mlp, zero_mlp)


def fd_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


def test_param_count_and_layout():
    net = init_mlp((3, 5, 2), np.random.default_rng(0))
    assert net.n_params == param_count((3, 5, 2)) == 3 * 5 + 5 + 5 * 2 + 2
    (w1, b1), (w2, b2) = net.layers()
    assert w1.shape == (3, 5) and b1.shape == (5,) and w2.shape == (5, 2)
    assert np.all(b1 == 0) and np.all(b2 == 0)
    lim = np.sqrt(6 / 8)
    assert np.all(np.abs(w1) <= lim)


def test_zero_net_outputs_zero():
    net = zero_mlp((4, 8, 3))
    assert np.all(mlp_forward(net, np.random.default_rng(1).normal(size=(7, 4))) == 0)


def test_identity_single_layer():
    net = Mlp((2, 2), np.array([1.0, 0, 0, 1, 0, 0]))
    np.testing.assert_array_equal(mlp_forward(net, np.array([[1.0, 2.0]])), [[1.0, 2.0]])


def test_one_hidden_unit_tanh():
    net = Mlp((1, 1, 1), np.array([1.0, 0.0, 1.0, 0.0]))
    assert mlp_forward(net, np.array([[0.5]]))[0, 0] == pytest.approx(0.46211715726, abs=1e-10)


def test_shape_errors():
    net = zero_mlp((3, 2))
    with pytest.raises(ShapeError):
        mlp_forward(net, np.zeros((4, 2)))
    with pytest.raises(ShapeError):
        mlp_backward(net, np.zeros((4, 3)), np.zeros((4, 3)))
    with pytest.raises(ShapeError):
        jacobian_vector_product(net, np.zeros((4, 3)), np.zeros(3))
    with pytest.raises(ShapeError):
        Mlp((3, 2), np.zeros(5))


def test_linear_chain_rule():
    net = Mlp((1, 1), np.array([1.5, 0.0]))
    g = mlp_backward(net, np.array([[2.0]]), np.array([[1.0]]))
    assert g[0] == 2.0 and g[1] == 1.0


def test_zero_upstream_zero_grad():
    net = init_mlp((3, 4, 2), np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(5, 3))
    assert np.all(mlp_backward(net, x, np.zeros((5, 2))) == 0)


def test_linear_jvp():
    net = Mlp((1, 1), np.array([2.0, 0.0]))
    assert jacobian_vector_product(net, np.array([[3.0]]), np.array([1.0, 0.0]))[0, 0] == 3.0
    assert np.all(jacobian_vector_product(net, np.array([[3.0]]), np.zeros(2)) == 0)


def _random_instance(seed):
    rng = np.random.default_rng(seed)
    sizes = (int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.integers(1, 4)))
    net = init_mlp(sizes, rng)
    net = net.with_flat(net.flat + 0.1 * rng.normal(size=net.n_params))
    x = rng.normal(size=(int(rng.integers(1, 6)), sizes[0]))
    up = rng.normal(size=(x.shape[0], sizes[-1]))
    return net, x, up, rng


@pytest.mark.parametrize("seed", range(100))
def test_backward_matches_finite_differences(seed):
    net, x, up, _ = _random_instance(seed)
    g = mlp_backward(net, x, up)
    fd = fd_grad(lambda f: float(np.sum(mlp_forward(net.view(f), x) * up)), net.flat.copy())
    assert rel_err(g, fd) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_jvp_matches_finite_differences_and_duality(seed):
    net, x, up, rng = _random_instance(seed)
    v = rng.normal(size=net.n_params)
    h = 1e-5
    fd = (mlp_forward(net.view(net.flat + h * v), x) - mlp_forward(net.view(net.flat - h * v), x)) / (2 * h)
    jv = jacobian_vector_product(net, x, v)
    assert rel_err(jv, fd) < 1e-4
    # <u, Jv> == <J^T u, v>
    lhs = np.sum(up * jv)
    rhs = mlp_backward(net, x, up) @ v
    assert abs(lhs - rhs) <= 1e-8 * max(1.0, abs(lhs))
    _, cache = mlp_forward(net, x, return_cache=True)
    np.testing.assert_array_equal(jacobian_vector_product(net, x, v, cache), jv)


def test_forward_deterministic():
    net, x, _, _ = _random_instance(3)
    assert mlp_forward(net, x).tobytes() == mlp_forward(net, x).tobytes()
    a = init_mlp((3, 4, 2), np.random.default_rng(9))
    b = init_mlp((3, 4, 2), np.random.default_rng(9))
    assert a.flat.tobytes() == b.flat.tobytes()


def test_out_scale_shrinks_last_layer_only():
    a = init_mlp((3, 4, 2), np.random.default_rng(9))
    b = init_mlp((3, 4, 2), np.random.default_rng(9), out_scale=0.01)
    np.testing.assert_array_equal(a.layers()[0][0], b.layers()[0][0])
    np.testing.assert_allclose(b.layers()[1][0], 0.01 * a.layers()[1][0])


# -- Adam ------------------------------------------------------------------

def test_adam_zero_grad_no_move():
    st_ = AdamState.zeros(3, 1e-3)
    p, st2 = adam_step(st_, np.ones(3), np.zeros(3))
    np.testing.assert_array_equal(p, np.ones(3))
    assert st2.t == 1


def test_adam_first_step_magnitude():
    p, _ = adam_step(AdamState.zeros(1, 1e-3), np.array([1.0]), np.array([1.0]))
    assert p[0] == pytest.approx(1.0 - 1e-3, abs=1e-9)


def test_adam_converges_on_quadratic():
    st_ = AdamState.zeros(1, 1e-3)
    x = np.array([1.0])
    for _ in range(10_000):
        x, st_ = adam_step(st_, x, 2 * x)
        if abs(x[0]) < 1e-3:
            break
    assert abs(x[0]) < 1e-3


def test_adam_rejects_nonfinite_and_length_mismatch():
    with pytest.raises(FloatingPointError):
        adam_step(AdamState.zeros(2, 1e-3), np.zeros(2), np.array([np.nan, 0.0]))
    with pytest.raises(ValueError):
        adam_step(AdamState.zeros(2, 1e-3), np.zeros(2), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
def test_adam_counter_monotone(grads):
    st_ = AdamState.zeros(1, 1e-3)
    p = np.zeros(1)
    for i, g in enumerate(grads, 1):
        p, st_ = adam_step(st_, p, np.array([g]))
        assert st_.t == i
        assert np.all(np.isfinite(p))


# -- checkpoints -----------------------------------------------------------

def test_checkpoint_round_trip():
    net = init_mlp((3, 7, 2), np.random.default_rng(4))
    buf = io.BytesIO()
    write_mlp(buf, net)
    assert buf.getvalue()[:4] == b"BRMN"
    buf.seek(0)
    back = read_mlp(buf)
    assert back.sizes == net.sizes and back.flat.tobytes() == net.flat.tobytes()


def test_checkpoint_corruption():
    raw = mlp_to_bytes(init_mlp((3, 7, 2), np.random.default_rng(4)))
    with pytest.raises(CheckpointError):
        read_mlp(io.BytesIO(raw[:-3]))
    with pytest.raises(CheckpointError):
        read_mlp(io.BytesIO(b"XXXX" + raw[4:]))
