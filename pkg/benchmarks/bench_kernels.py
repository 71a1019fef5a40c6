"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--sizes 32 128 256]

Prints one row per (kernel, N) with the best-of-repeat wall time of each
backend and the speedup. Exits with status 1 when the compiled extension is
not built.
"""

import argparse
import sys
import timeit

import numpy as np

from hkrm import _kernels_py as py

try:
    from hkrm import _kernels as cy
except ImportError:
    cy = None


def cases(n, dim, rng):
    f = rng.normal(size=(n, dim))
    ii, jj = np.triu_indices(n)
    grad_pairs = rng.normal(size=(ii.size, dim))
    raw = rng.normal(size=(n, n))
    adj, sums = py.row_normalize(raw, 0.0)
    grad_adj = rng.normal(size=(n, n))
    return {
        "pairwise_l1": lambda k: k.pairwise_l1(f),
        "pairwise_l1_pairs": lambda k: k.pairwise_l1_pairs(f, ii, jj),
        "pairwise_l1_pairs_backward": lambda k: k.pairwise_l1_pairs_backward(f, ii, jj, grad_pairs),
        "row_normalize": lambda k: k.row_normalize(raw, 0.0),
        "row_normalize_backward": lambda k: k.row_normalize_backward(raw, adj, sums, grad_adj, 0.0),
    }


def best_time(fn, repeat):
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat=repeat, number=number)) / number


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--sizes", type=int, nargs="+", default=[32, 128, 256])
    parser.add_argument("--dim", type=int, default=64)
    args = parser.parse_args(argv)
    if cy is None:
        print("compiled extension hkrm._kernels is not built; run `pip install -e .` first", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28} {'N':>5} {'python (ms)':>12} {'cython (ms)':>12} {'speedup':>8}")
    for n in args.sizes:
        for name, call in cases(n, args.dim, rng).items():
            t_py = best_time(lambda: call(py), args.repeat)
            t_cy = best_time(lambda: call(cy), args.repeat)
            print(f"{name:<28} {n:>5} {t_py * 1e3:>12.4f} {t_cy * 1e3:>12.4f} {t_py / t_cy:>7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
