"""Compiled vs pure-Python kernels: wall time and agreement.

    python benchmarks/bench_kernels.py [--repeat 3]
"""
import argparse
import time

import numpy as np

from eqfreedm import _kernels_py as py
from eqfreedm.dmap import default_fit_epsilon

try:
    from eqfreedm import _kernels as cy
except ImportError:
    cy = None

L, A, H, V0 = 60.0, 1.7, 2.4, 1.0


def ring_state(n=30, seed=0):
    rng = np.random.default_rng(seed)
    x = L * np.arange(n) / n + 2.0 * np.sin(2 * np.pi * np.arange(1, n + 1) / n)
    return np.concatenate([np.mod(x, L), np.full(n, 1.0)]) + 1e-3 * rng.standard_normal(2 * n)


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases():
    z = ring_state()
    t_out = np.array([900.0])
    rng = np.random.default_rng(1)
    Psi = rng.standard_normal((1000, 2))
    target = Psi[:, 0] ** 2 + 0.1 * rng.standard_normal(1000)
    eps = default_fit_epsilon(Psi)
    return {
        "ov_rhs x 10000": (
            lambda k: [k.ov_rhs(z, L, A, H, V0) for _ in range(10000)][-1],
            lambda a, b: np.abs(a - b).max()),
        "integrate_ov t=900": (
            lambda k: k.integrate_ov(z, t_out, L, A, H, V0, 1e-10, 1e-10)[0],
            lambda a, b: np.abs(a - b).max()),
        "local_fit_residuals M=1000": (
            lambda k: k.local_fit_residuals(Psi, target, eps)[0],
            lambda a, b: np.abs(a - b).max()),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if cy is None:
        raise SystemExit("compiled kernels not built; run `pip install -e . --no-build-isolation`")
    print(f"{'kernel':<28}{'python s':>10}{'cython s':>10}{'speedup':>9}{'max diff':>11}")
    for name, (run, diff) in cases().items():
        tp, a = best_of(lambda: run(py), args.repeat)
        tc, b = best_of(lambda: run(cy), args.repeat)
        print(f"{name:<28}{tp:>10.4f}{tc:>10.4f}{tp / tc:>9.1f}{diff(a, b):>11.2e}")


if __name__ == "__main__":
    main()
