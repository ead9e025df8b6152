# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Must stay bitwise-compatible with _pykernels."""
from libc.math cimport exp, fabs, sqrt, M_PI

import numpy as np


def gae(const double[::1] rewards, const double[::1] values,
        const double[::1] next_values, const unsigned char[::1] terminals,
        const unsigned char[::1] ends, double gamma, double lam):
    cdef Py_ssize_t n = rewards.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] adv = out
    cdef double gl = gamma * lam
    cdef double carry = 0.0
    cdef double nv, delta
    cdef Py_ssize_t t
    for t in range(n - 1, -1, -1):
        if ends[t]:
            carry = 0.0
        nv = 0.0 if terminals[t] else next_values[t]
        delta = (rewards[t] + gamma * nv) - values[t]
        carry = delta + gl * carry
        adv[t] = carry
    return out


def discounted_returns(const double[::1] rewards, const unsigned char[::1] ends,
                       double gamma):
    cdef Py_ssize_t n = rewards.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] ret = out
    cdef double carry = 0.0
    cdef Py_ssize_t t
    for t in range(n - 1, -1, -1):
        if ends[t]:
            carry = 0.0
        carry = rewards[t] + gamma * carry
        ret[t] = carry
    return out


def gaussian_tv_trapezoid(double mu1, double s1, double mu2, double s2,
                          Py_ssize_t n_points=100000, double width=8.0):
    cdef double lo = min(mu1 - width * s1, mu2 - width * s2)
    cdef double hi = max(mu1 + width * s1, mu2 + width * s2)
    cdef double h = (hi - lo) / (n_points - 1)
    cdef double c1 = 1.0 / (s1 * sqrt(2.0 * M_PI))
    cdef double c2 = 1.0 / (s2 * sqrt(2.0 * M_PI))
    cdef double acc = 0.0
    cdef double x, z1, z2, f
    cdef Py_ssize_t i
    for i in range(n_points):
        x = lo + i * h
        z1 = (x - mu1) / s1
        z2 = (x - mu2) / s2
        f = fabs(c1 * exp(-0.5 * z1 * z1) - c2 * exp(-0.5 * z2 * z2))
        if i == 0 or i == n_points - 1:
            f = 0.5 * f
        acc += f
    return 0.5 * acc * h
