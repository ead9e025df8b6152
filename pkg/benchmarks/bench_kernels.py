"""Compare the compiled and pure-Python kernel backends.

Usage: python3 benchmarks/bench_kernels.py [--n 200000] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from bremen import _pykernels, kernels

try:
    from bremen import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def cases(n, rng):
    r, v, nv = rng.normal(size=(3, n))
    term = rng.random(n) < 0.01
    ends = rng.random(n) < 0.02
    ends[-1] = True
    return {
        "gae": lambda impl: kernels.gae(r, v, nv, term, ends, 0.99, 0.95, impl=impl),
        "discounted_returns": lambda impl: kernels.discounted_returns(r, ends, 0.99, impl=impl),
        "gaussian_tv_trapezoid": lambda impl: kernels.gaussian_tv_trapezoid(0.0, 1.0, 0.3, 1.2, n, impl=impl),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls = [("python", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    print(f"n={args.n}  best of {args.repeat}  (default backend: {kernels.BACKEND})")
    print(f"{'kernel':<24}" + "".join(f"{name:>12}" for name, _ in impls) + f"{'speedup':>10}  max |diff|")
    for name, fn in cases(args.n, np.random.default_rng(0)).items():
        times, outs = [], []
        for _, impl in impls:
            times.append(min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat)))
            outs.append(np.atleast_1d(fn(impl)))
        speed = f"{times[0] / times[1]:9.1f}x" if len(times) == 2 else "      n/a"
        diff = float(np.max(np.abs(outs[0] - outs[-1])))
        print(f"{name:<24}" + "".join(f"{t * 1e3:10.2f}ms" for t in times) + f"{speed}  {diff:.1e}")


if __name__ == "__main__":
    main()
