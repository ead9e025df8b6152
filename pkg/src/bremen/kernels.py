"""Kernel backend selection.

The compiled extension is used when it imports; otherwise (or when
``BREMEN_PURE_PYTHON=1``) the pure-Python implementations are used.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if os.environ.get("BREMEN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _u8(a):
    return np.ascontiguousarray(a, dtype=np.uint8)


def gae(rewards, values, next_values, terminals, ends, gamma, lam, impl=None):
    """Backward GAE recursion; ``ends`` marks the last step of each trajectory."""
    impl = impl or _impl
    return impl.gae(_f64(rewards), _f64(values), _f64(next_values),
                    _u8(terminals), _u8(ends), float(gamma), float(lam))


def discounted_returns(rewards, ends, gamma, impl=None):
    impl = impl or _impl
    return impl.discounted_returns(_f64(rewards), _u8(ends), float(gamma))


def gaussian_tv_trapezoid(mu1, s1, mu2, s2, n_points=100_000, width=8.0, impl=None):
    impl = impl or _impl
    return impl.gaussian_tv_trapezoid(float(mu1), float(s1), float(mu2), float(s2),
                                      int(n_points), float(width))
