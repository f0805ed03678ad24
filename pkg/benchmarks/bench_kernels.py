"""Time every kernel under the compiled-loop and pure-numpy backends.

Run ``python3 benchmarks/bench_kernels.py``; ``--repeat`` controls the number
of timed calls per kernel (after one warm-up call that absorbs compilation).
"""

import argparse
import timeit

import numpy as np

from prism import kernels


def cases(rng):
    X = rng.normal(size=(2000, 16)).cumsum(axis=0)
    C = np.corrcoef(X[:200].T)
    A = np.where(np.abs(C) >= 0.5, np.abs(C), 0.0)
    np.fill_diagonal(A, 0.0)
    S = C @ C.T
    seg = rng.normal(size=(80, 48))
    starts = np.arange(80) * 24
    return {
        "dft_magnitude": (rng.normal(size=2048),),
        "lagged_correlations": (X[:, 0], X[:, 1], 24),
        "lag_matrix": (X[:500], 12),
        "overlap_add": (seg, starts, np.hanning(48) + 1e-3, 80 * 24 + 24),
        "floor_cap_rows": (A, C, 1, 4, 1.0),
        "sym_power_iteration": (S, 0.0, rng.normal(size=16), 1e-12, 10_000),
        "window_correlations": (X, np.arange(47, 2000, 10), 48),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20, help="timed calls per kernel (default: %(default)s)")
    ap.add_argument("--seed", type=int, default=0, help="input RNG seed (default: %(default)s)")
    args = ap.parse_args(argv)

    print(f"{'kernel':<22}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, inputs in cases(np.random.default_rng(args.seed)).items():
        times = []
        for backend in ("numba", "numpy"):
            fn = kernels.get(name, backend)
            fn(*inputs)
            times.append(1e3 * timeit.timeit(lambda: fn(*inputs), number=args.repeat) / args.repeat)
        print(f"{name:<22}{times[0]:>12.3f}{times[1]:>12.3f}{times[1] / times[0]:>9.1f}x")


if __name__ == "__main__":
    main()
