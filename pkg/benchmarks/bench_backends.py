"""Benchmark the compiled kernels against the pure-numpy fallback.

Runs identical seeded backfitting chains under both backends across a
range of problem sizes, reports wall time per tree update, and verifies
that the two backends produced bit-identical chains.

Usage: python benchmarks/bench_backends.py [--sweeps N]
"""

import argparse
import time

import numpy as np

from bcmforest._kernels import available_backends, use_backend
from bcmforest.trees import ForestSampler, TreePrior, leaf_scale


def run_chain(backend, n, p, m, sweeps, seed=0):
    use_backend(backend)
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, p))
    y = (np.where(X[:, 0] > 0.5, 1.0, -1.0) + np.sin(4 * X[:, 1])
         + 0.4 * rng.standard_normal(n))
    y = (y - y.mean()) / y.std()
    scales = np.ones(n)
    sampler = ForestSampler(X, m, TreePrior(), leaf_scale(2.0, m))
    start = time.perf_counter()
    for _ in range(sweeps):
        sampler.sweep(y, scales, 0.3, rng)
    elapsed = time.perf_counter() - start
    return elapsed, sampler.full_fit.copy()


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sweeps", type=int, default=100)
    args = parser.parse_args()

    backends = available_backends()
    if "c" not in backends:
        print("compiled kernels unavailable; benchmarking python backend only")
    cases = [(500, 8, 50), (2000, 8, 50), (8000, 12, 50)]
    print(f"{'n':>6} {'p':>3} {'m':>4} {'sweeps':>6} "
          + "".join(f"{b + ' (s)':>12}" for b in backends)
          + f"{'speedup':>9} {'identical':>10}")
    for n, p, m in cases:
        times = {}
        fits = {}
        for backend in backends:
            times[backend], fits[backend] = run_chain(
                backend, n, p, m, args.sweeps)
        line = f"{n:>6} {p:>3} {m:>4} {args.sweeps:>6}"
        for backend in backends:
            line += f"{times[backend]:>12.2f}"
        if "c" in backends:
            speedup = times["python"] / times["c"]
            same = np.array_equal(fits["python"], fits["c"])
            line += f"{speedup:>8.2f}x {str(same):>10}"
        print(line)
        updates = args.sweeps * m
        per_update = {b: times[b] / updates * 1e6 for b in backends}
        detail = "  ".join(f"{b}: {per_update[b]:.1f} us/update"
                           for b in backends)
        print(f"       {detail}")


if __name__ == "__main__":
    main()
