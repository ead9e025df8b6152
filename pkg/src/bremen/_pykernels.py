"""Pure-Python twins of the compiled kernels in ``_ckernels.pyx``.

The recursions use the same operation order as the C code so both backends
agree bit for bit.
"""
import numpy as np


def gae(rewards, values, next_values, terminals, ends, gamma, lam):
    n = len(rewards)
    out = np.empty(n, dtype=np.float64)
    r = rewards.tolist()
    v = values.tolist()
    nvs = next_values.tolist()
    term = terminals.tolist()
    end = ends.tolist()
    gamma = float(gamma)
    gl = gamma * float(lam)
    carry = 0.0
    for t in range(n - 1, -1, -1):
        if end[t]:
            carry = 0.0
        nv = 0.0 if term[t] else nvs[t]
        delta = (r[t] + gamma * nv) - v[t]
        carry = delta + gl * carry
        out[t] = carry
    return out


def discounted_returns(rewards, ends, gamma):
    n = len(rewards)
    out = np.empty(n, dtype=np.float64)
    r = rewards.tolist()
    end = ends.tolist()
    gamma = float(gamma)
    carry = 0.0
    for t in range(n - 1, -1, -1):
        if end[t]:
            carry = 0.0
        carry = r[t] + gamma * carry
        out[t] = carry
    return out


def gaussian_tv_trapezoid(mu1, s1, mu2, s2, n_points=100000, width=8.0):
    lo = min(mu1 - width * s1, mu2 - width * s2)
    hi = max(mu1 + width * s1, mu2 + width * s2)
    h = (hi - lo) / (n_points - 1)
    x = lo + np.arange(n_points) * h
    z1 = (x - mu1) / s1
    z2 = (x - mu2) / s2
    c1 = 1.0 / (s1 * np.sqrt(2.0 * np.pi))
    c2 = 1.0 / (s2 * np.sqrt(2.0 * np.pi))
    f = np.abs(c1 * np.exp(-0.5 * z1 * z1) - c2 * np.exp(-0.5 * z2 * z2))
    f[0] *= 0.5
    f[-1] *= 0.5
    return 0.5 * float(f.sum()) * h
