"""Empirical instantiation of the policy/model error bounds.

Supremum terms are approximated by maxima over the available samples; every
report produced here carries ``sup_proxy="empirical max over samples"``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .autodiff import mlp_forward
from .dynamics import prediction_error

QUARTER_LOG_2PI = 0.25 * math.log(2.0 * math.pi)


class BoundError(ValueError):
    pass


def gaussian_entropy(sigma) -> float:
    """Differential entropy of a diagonal Gaussian with std ``sigma``."""
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    return float(np.sum(np.log(sigma * math.sqrt(2.0 * math.pi * math.e))))


def _grouped_max_mean(keys: np.ndarray, values: np.ndarray) -> float:
    # sup over distinct keys of the mean of values sharing that key
    _, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    sums = np.bincount(inv, weights=values)
    counts = np.bincount(inv)
    return float(np.max(sums / counts))


def estimate_loss_epsilons(dataset, bc_net, ensemble, behavior_entropy: float | None,
                           dynamics_entropy: float = 0.0):
    """Return ``(eps_beta, eps_phi, flags)``.

    ``eps_beta`` is the largest per-state mean of ``0.5*||a - tanh(bc(s))||^2``
    minus the behaviour entropy; ``eps_phi`` the analogous quantity for the
    ensemble's worst member over ``(s, a)`` pairs. An unknown behaviour
    entropy (``None``) is set to 0 and flagged.
    """
    if len(dataset) == 0:
        raise BoundError("empty dataset")
    flags = []
    if behavior_entropy is None:
        behavior_entropy = 0.0
        flags.append("behavior_entropy_unknown_set_to_zero")
    pred = np.tanh(mlp_forward(bc_net, dataset.s))
    bc_err = 0.5 * np.sum((dataset.a - pred) ** 2, axis=1)
    eps_beta = _grouped_max_mean(dataset.s, bc_err) - behavior_entropy

    sa = np.concatenate([dataset.s, dataset.a], axis=1)
    per_member = []
    for i in range(ensemble.k):
        err = 0.5 * np.sum(prediction_error(ensemble, i, dataset.s, dataset.a, dataset.s_next) ** 2, axis=1)
        per_member.append(_grouped_max_mean(sa, err))
    eps_phi = max(per_member) - dynamics_entropy
    return eps_beta, eps_phi, flags


def proposition1_bounds(eps_beta: float, eps_phi: float, T: int, delta: float):
    """Upper bounds on the policy shift and the model error (TV)."""
    rb = 0.5 * eps_beta + QUARTER_LOG_2PI
    rp = 0.5 * eps_phi + QUARTER_LOG_2PI
    if rb < 0:
        raise BoundError(f"negative radicand {rb} for the policy bound (inconsistent entropy?)")
    if rp < 0:
        raise BoundError(f"negative radicand {rp} for the model bound (inconsistent entropy?)")
    if T < 0 or delta < 0:
        raise BoundError("T and delta must be non-negative")
    eps_pi = math.sqrt(rb) + T * math.sqrt(0.5 * delta)
    eps_m = math.sqrt(rp)
    return eps_pi, eps_m


def return_gap_penalty(eps_m: float, eps_pi: float, gamma: float, r_max: float) -> float:
    return (2.0 * gamma * r_max * (eps_m + 2.0 * eps_pi) / (1.0 - gamma) ** 2
            + 4.0 * r_max * eps_pi / (1.0 - gamma))


def return_gap_bound(eta_hat: float, eps_m: float, eps_pi: float, gamma: float, r_max: float) -> float:
    """Lower bound on the true return given the model return."""
    if not 0.0 < gamma < 1.0:
        raise BoundError("gamma must be in (0, 1)")
    return eta_hat - return_gap_penalty(eps_m, eps_pi, gamma, r_max)


# -- Pinsker ---------------------------------------------------------------

def gaussian_kl_diag(mu_p, sig_p, mu_q, sig_q) -> float:
    mu_p, sig_p, mu_q, sig_q = (np.atleast_1d(np.asarray(x, dtype=np.float64))
                                for x in (mu_p, sig_p, mu_q, sig_q))
    return float(np.sum(np.log(sig_q / sig_p)
                        + (sig_p**2 + (mu_p - mu_q) ** 2) / (2 * sig_q**2) - 0.5))


def gaussian_tv(mu_p, sig_p, mu_q, sig_q, n_points: int = 100_000) -> float:
    """TV by trapezoid integration; exact (to quadrature error) in 1-D.

    For diagonal Gaussians in higher dimension this returns the maximum of the
    per-coordinate TVs, a lower bound on the joint TV.
    """
    mu_p, sig_p, mu_q, sig_q = (np.atleast_1d(np.asarray(x, dtype=np.float64))
                                for x in (mu_p, sig_p, mu_q, sig_q))
    return max(kernels.gaussian_tv_trapezoid(a, b, c, d, n_points)
               for a, b, c, d in zip(mu_p, sig_p, mu_q, sig_q))


def pinsker_tv_check(pairs, tol: float = 1e-9, n_points: int = 100_000):
    """Count pairs with TV > sqrt(KL/2) + tol. Returns ``(violations, rows)``."""
    violations = 0
    rows = []
    for (mu_p, sig_p), (mu_q, sig_q) in pairs:
        tv = gaussian_tv(mu_p, sig_p, mu_q, sig_q, n_points)
        kl = gaussian_kl_diag(mu_p, sig_p, mu_q, sig_q)
        bound = math.sqrt(kl / 2.0)
        bad = tv > bound + tol
        violations += int(bad)
        rows.append((tv, kl, bound))
    return violations, rows


# -- report ----------------------------------------------------------------

@dataclass
class BoundReport:
    eps_beta: float
    eps_phi: float
    eps_pi_bound: float
    eps_m_bound: float
    measured_policy_tv: float | None
    measured_model_tv: float | None
    eta_hat: float
    return_gap_penalty: float
    return_lower_bound: float
    r_max: float
    gamma: float
    T: int
    delta: float
    behavior_entropy: float
    dynamics_entropy: float
    sup_proxy: str = "empirical max over samples"
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def build_bound_report(dataset, bc_net, ensemble, *, T, delta, gamma, r_max, eta_hat,
                       behavior_entropy=None, dynamics_entropy=0.0,
                       measured_policy_tv=None, measured_model_tv=None) -> BoundReport:
    eps_beta, eps_phi, flags = estimate_loss_epsilons(dataset, bc_net, ensemble,
                                                      behavior_entropy, dynamics_entropy)
    eps_pi, eps_m = proposition1_bounds(eps_beta, eps_phi, T, delta)
    penalty = return_gap_penalty(eps_m, eps_pi, gamma, r_max)
    return BoundReport(
        eps_beta, eps_phi, eps_pi, eps_m, measured_policy_tv, measured_model_tv,
        eta_hat, penalty, eta_hat - penalty, r_max, gamma, T, delta,
        0.0 if behavior_entropy is None else behavior_entropy, dynamics_entropy,
        flags=flags,
    )
