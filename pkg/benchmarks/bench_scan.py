"""Compare the compiled and numpy scan kernels on random float32 matrices.

    python3 benchmarks/bench_scan.py --rows 100000 --dim 64 --k 10
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from lightdot import kernels


def time_backend(mod, vectors, ids, queries, k: int, reps: int) -> float:
    mod.scan_top_k(vectors, ids, queries[0], k)
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        for q in queries:
            mod.scan_top_k(vectors, ids, q, k)
        best = min(best, (time.perf_counter() - t0) / len(queries))
    return best


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=100_000)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--queries", type=int, default=20)
    ap.add_argument("--reps", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    vectors = rng.standard_normal((args.rows, args.dim)).astype(np.float32)
    ids = np.arange(args.rows, dtype=np.uint64)
    queries = rng.standard_normal((args.queries, args.dim))

    results = {}
    for name in kernels.available_backends():
        results[name] = time_backend(kernels.backend(name), vectors, ids, queries, args.k, args.reps)
        print(f"{name:8s} {results[name] * 1e3:9.3f} ms/query  ({args.rows} x {args.dim}, k={args.k})")
    if len(results) == 2:
        print(f"cython speedup over numpy: {results['python'] / results['cython']:.2f}x")
    else:
        print("compiled backend unavailable; only the numpy kernel was timed")


if __name__ == "__main__":
    main()
