"""Throughput comparison between the jit and pure-numpy kernel backends.

Runs every hot kernel on identical inputs through both implementations,
checks that the outputs agree, and prints a table of best-of-repeats
wall times. Sizes are configurable; the defaults mirror a bulky
desk-scale run so the numba warmup amortizes realistically.

Usage: python benchmarks/bench_kernels.py [--vectors N] [--dim D]
       [--clusters K] [--steps T] [--repeats R]
"""

import argparse
import time

import numpy as np

from svquant.kernels import _numpy

try:
    from svquant.kernels import _numba
except ImportError:
    _numba = None


def best_time(fn, args, repeats):
    fn(*args)  # warmup; also triggers jit compilation
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def agree(a, b) -> bool:
    if isinstance(a, tuple):
        return all(agree(x, y) for x, y in zip(a, b))
    return bool(np.allclose(a, b, rtol=1e-12, atol=1e-12))


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--vectors", type=int, default=200_000)
    ap.add_argument("--dim", type=int, default=4)
    ap.add_argument("--clusters", type=int, default=256)
    ap.add_argument("--steps", type=int, default=4096)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    vectors = rng.normal(0.0, 1.0, (args.vectors, args.dim))
    weights = rng.uniform(0.1, 2.0, (args.vectors, args.dim))
    codebook = rng.normal(0.0, 1.0, (args.clusters, args.dim))
    indices = rng.integers(0, args.clusters, args.vectors).astype(np.int64)

    dim = 64
    k = rng.normal(0.0, 1.0, (args.steps, dim))
    v = rng.normal(0.0, 1.0, (args.steps, dim))
    decay = rng.uniform(0.1, 2.0, dim)
    bonus = rng.uniform(-0.5, 0.5, dim)

    cases = [
        ("assign_nearest", (vectors, codebook)),
        ("assign_nearest_weighted", (vectors, weights, codebook)),
        ("accumulate_clusters", (vectors, indices, args.clusters)),
        ("accumulate_clusters_weighted", (vectors, weights, indices, args.clusters)),
        ("wkv_sequence", (k, v, decay, bonus)),
    ]

    if _numba is None:
        print("numba backend unavailable; timing the numpy fallback only")
    header = f"{'kernel':<30} {'numpy':>10} {'numba':>10} {'speedup':>8}  match"
    print(header)
    print("-" * len(header))
    for name, case_args in cases:
        np_fn = getattr(_numpy, name)
        t_np = best_time(np_fn, case_args, args.repeats)
        if _numba is None:
            print(f"{name:<30} {t_np * 1e3:>8.2f}ms {'-':>10} {'-':>8}")
            continue
        nb_fn = getattr(_numba, name)
        t_nb = best_time(nb_fn, case_args, args.repeats)
        match = agree(np_fn(*case_args), nb_fn(*case_args))
        print(
            f"{name:<30} {t_np * 1e3:>8.2f}ms {t_nb * 1e3:>8.2f}ms "
            f"{t_np / t_nb:>7.1f}x  {match}"
        )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
