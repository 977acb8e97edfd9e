"""Benchmark the numba kernels against the pure-numpy fallback.

Run: python3 benchmarks/bench_kernels.py
The same comparison is what REVMARK_NUMBA=0 switches at import time.
"""

import time

import numpy as np

from revmark.kernels import (_pairwise_sq_dists_numba, _pairwise_sq_dists_numpy,
                             _sgd_steps_numba, _sgd_steps_numpy)


def time_call(fn, *args, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_sgd():
    rng = np.random.default_rng(0)
    d, hidden, classes, n = 256, 64, 10, 3200
    x = rng.random((n, d))
    y = rng.integers(0, classes, n)
    sched = rng.integers(0, n, size=(30 * (n // 32), 32)).astype(np.int64)
    print(f"sgd_steps: {sched.shape[0]} steps of batch 32, {d}->{hidden}->{classes}")
    for name, fn in [("numpy", _sgd_steps_numpy), ("numba", _sgd_steps_numba)]:
        if fn is None:
            print(f"  {name:>6}: unavailable")
            continue
        def run():
            w1 = rng.standard_normal((d, hidden)) * 0.01
            w2 = rng.standard_normal((hidden, classes)) * 0.01
            fn(w1, np.zeros(hidden), w2, np.zeros(classes), x, y, sched, 0.05)
        run()  # jit warmup / first call
        print(f"  {name:>6}: {time_call(run):8.3f} s")


def bench_pairwise():
    rng = np.random.default_rng(1)
    a = rng.random((1000, 256))
    b = rng.random((1000, 256))
    print("pairwise_sq_dists: 1000 x 1000 points in 256-d")
    for name, fn in [("numpy", _pairwise_sq_dists_numpy), ("numba", _pairwise_sq_dists_numba)]:
        if fn is None:
            print(f"  {name:>6}: unavailable")
            continue
        fn(a, b)
        print(f"  {name:>6}: {time_call(fn, a, b):8.3f} s")


if __name__ == "__main__":
    bench_sgd()
    bench_pairwise()
