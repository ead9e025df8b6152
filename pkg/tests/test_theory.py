import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bremen.autodiff import Mlp, zero_mlp
from bremen.dataset import Dataset
from bremen.dynamics import DynamicsEnsemble
from bremen.theory import (BoundError, build_bound_report, estimate_loss_epsilons, gaussian_entropy,
                           gaussian_kl_diag, gaussian_tv, pinsker_tv_check, proposition1_bounds,
                           return_gap_bound, return_gap_penalty)

QUARTER = math.sqrt(0.25 * math.log(2 * math.pi))


def test_prop1_known_values():
    assert proposition1_bounds(0.0, 0.0, 0, 0.05) == pytest.approx((0.6779, 0.6779), abs=1e-4)
    eps_pi, _ = proposition1_bounds(0.0, 0.0, 10, 0.05)
    assert eps_pi - QUARTER == pytest.approx(1.5811, abs=1e-4)


def test_prop1_negative_radicand():
    with pytest.raises(BoundError):
        proposition1_bounds(-10.0, 0.0, 1, 0.05)
    with pytest.raises(BoundError):
        proposition1_bounds(0.0, -10.0, 1, 0.05)


def test_return_gap_known_values():
    assert return_gap_bound(3.0, 0.0, 0.0, 0.99, 1.0) == 3.0
    assert return_gap_penalty(0.01, 0.0, 0.99, 1.0) == pytest.approx(198.0, rel=1e-12)
    with pytest.raises(BoundError):
        return_gap_bound(0.0, 0.1, 0.1, 1.0, 1.0)


def test_penalty_monotone_on_grid():
    grid = np.linspace(0, 1, 11)
    for g in (0.5, 0.9, 0.99):
        vals = np.array([[return_gap_penalty(m, p, g, 2.0) for p in grid] for m in grid])
        assert np.all(np.diff(vals, axis=0) > 0) and np.all(np.diff(vals, axis=1) > 0)


# independent high-precision re-evaluation of the bound formulas
def _mp_prop1(eb, ep, T, d):
    q = mp.log(2 * mp.pi) / 4
    return mp.sqrt(eb / 2 + q) + T * mp.sqrt(d / 2), mp.sqrt(ep / 2 + q)


def _mp_gap(eta, em, epi, g, r):
    one = mp.mpf(1)
    return eta - (2 * g * r * (em + 2 * epi) / (one - g) ** 2 + 4 * r * epi / (one - g))


def test_formula_fidelity_1000_inputs():
    mp.mp.dps = 40
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        eb, ep = rng.uniform(-0.9, 5.0, 2)  # radicands stay >= 0
        T, d = int(rng.integers(0, 3000)), rng.uniform(1e-4, 1.0)
        pi_b, m_b = proposition1_bounds(eb, ep, T, d)
        pi_o, m_o = _mp_prop1(mp.mpf(eb), mp.mpf(ep), T, mp.mpf(d))
        worst = max(worst, abs(pi_b - float(pi_o)) / max(1, abs(float(pi_o))),
                    abs(m_b - float(m_o)) / max(1, abs(float(m_o))))
        eta, g, r = rng.normal() * 100, rng.uniform(0.01, 0.999), rng.uniform(0, 10)
        lb = return_gap_bound(eta, m_b, pi_b, g, r)
        lo = _mp_gap(mp.mpf(eta), mp.mpf(m_b), mp.mpf(pi_b), mp.mpf(g), mp.mpf(r))
        worst = max(worst, abs(lb - float(lo)) / max(1, abs(float(lo))))
    assert worst <= 1e-12


# -- Pinsker -----------------------------------------------------------------

def test_tv_and_kl_known():
    assert gaussian_kl_diag(0, 1, 1, 1) == pytest.approx(0.5)
    assert gaussian_tv(0, 1, 1, 1) == pytest.approx(math.erf(0.5 / math.sqrt(2)), abs=1e-9)
    assert gaussian_tv(0, 1, 0, 1) == 0.0
    v, rows = pinsker_tv_check([((0.0, 1.0), (0.0, 1.0)), ((0.0, 1.0), (1.0, 1.0))])
    assert v == 0 and rows[1][2] == pytest.approx(0.5)


def test_tv_matches_mpmath_quadrature():
    mp.mp.dps = 30
    for m1, s1, m2, s2 in [(0, 1, 0.3, 2.0), (-1, 0.2, 1, 0.5), (0.5, 3, 0.4, 2.9)]:
        f = lambda x: abs(mp.npdf(x, m1, s1) - mp.npdf(x, m2, s2))
        lo, hi = min(m1 - 8 * s1, m2 - 8 * s2), max(m1 + 8 * s1, m2 + 8 * s2)
        ref = 0.5 * mp.quad(f, mp.linspace(lo, hi, 60))
        assert gaussian_tv(m1, s1, m2, s2) == pytest.approx(float(ref), abs=1e-8)


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5), st.floats(0.05, 5), st.floats(-5, 5), st.floats(0.05, 5))
def test_pinsker_property(m1, s1, m2, s2):
    v, _ = pinsker_tv_check([((m1, s1), (m2, s2))], n_points=20_001)
    assert v == 0


def test_gaussian_entropy():
    assert gaussian_entropy(1.0) == pytest.approx(0.5 * math.log(2 * math.pi * math.e))
    assert gaussian_entropy([0.1, 0.1]) == pytest.approx(2 * math.log(0.1 * math.sqrt(2 * math.pi * math.e)))


# -- loss epsilons -------------------------------------------------------------

def _identity_ensemble(S, A):
    return DynamicsEnsemble([zero_mlp((S + A, S))], np.zeros(S + A), np.ones(S + A), np.ones(S))


def test_zero_error_data_gives_zero_eps():
    s = np.random.default_rng(0).normal(size=(20, 2))
    d = Dataset(s, np.zeros((20, 1)), np.zeros(20), s, np.zeros(20, bool), np.ones(20, np.int64))
    eb, ep, flags = estimate_loss_epsilons(d, zero_mlp((2, 1)), _identity_ensemble(2, 1), 0.0)
    assert eb == 0.0 and ep == 0.0 and not flags
    _, _, flags = estimate_loss_epsilons(d, zero_mlp((2, 1)), _identity_ensemble(2, 1), None)
    assert flags == ["behavior_entropy_unknown_set_to_zero"]
    with pytest.raises(BoundError):
        estimate_loss_epsilons(d.subset(np.arange(0)), zero_mlp((2, 1)), _identity_ensemble(2, 1), 0.0)


def test_perfect_clone_of_gaussian_behavior():
    # many samples at each of a few states; clone is exact, so the per-state error mean is A*sigma^2/2
    rng = np.random.default_rng(1)
    sigma, A, reps = 0.1, 2, 20_000
    states = np.repeat(rng.normal(size=(3, 2)), reps, axis=0)
    a = sigma * rng.normal(size=(len(states), A))
    d = Dataset(states, a, np.zeros(len(a)), states, np.zeros(len(a), bool), np.ones(len(a), np.int64))
    h = gaussian_entropy(np.full(A, sigma))
    eb, _, _ = estimate_loss_epsilons(d, zero_mlp((2, A)), _identity_ensemble(2, A), h)
    assert eb == pytest.approx(A * sigma**2 / 2 - h, abs=5e-4)


def test_report_consistency():
    s = np.random.default_rng(0).normal(size=(20, 2))
    d = Dataset(s, np.zeros((20, 1)), np.ones(20), s + 0.1, np.zeros(20, bool), np.ones(20, np.int64))
    rep = build_bound_report(d, zero_mlp((2, 1)), _identity_ensemble(2, 1), T=5, delta=0.05, gamma=0.9,
                             r_max=1.0, eta_hat=2.0)
    assert rep.eps_phi == pytest.approx(0.5 * 2 * 0.01)
    pi, m = proposition1_bounds(rep.eps_beta, rep.eps_phi, 5, 0.05)
    assert rep.eps_pi_bound == pi and rep.eps_m_bound == m
    assert rep.return_lower_bound == pytest.approx(return_gap_bound(2.0, m, pi, 0.9, 1.0))
    assert rep.sup_proxy == "empirical max over samples" and rep.eps_m_bound >= 0
    assert set(rep.to_dict()) >= {"eps_beta", "eps_phi", "flags"}
