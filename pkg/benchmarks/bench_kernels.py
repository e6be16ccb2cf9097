"""Compare the numba kernels with their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20]

Checks bitwise agreement first, then reports the best-of-N wall time for
each kernel on shapes typical of a 32-molecule training batch.
"""
import argparse
import time

import numpy as np

from asba import _kernels as K


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--atoms", type=int, default=500)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--samples", type=int, default=100_000)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        print("numba unavailable (or ASBA_DISABLE_NUMBA set); nothing to compare")
        return
    rng = np.random.default_rng(0)
    n, d = args.atoms, args.d
    edges = 2 * n
    vals = rng.normal(size=(edges, d))
    idx = rng.integers(0, n, size=edges)
    a = rng.normal(size=(n, d))
    w = rng.normal(size=(d, d))
    m = args.samples
    labels = rng.integers(0, 2, size=m)
    post = rng.random(m)
    nf = rng.uniform(-0.3, 0.3, size=(m, 2))
    ng = rng.uniform(-0.3, 0.3, size=(m, 2))

    cases = [
        ("segment_sum", lambda: K.segment_sum_numba(vals, idx, n), lambda: K.segment_sum_numpy(vals, idx, n)),
        ("matmul", lambda: K.matmul_numba(a, w), lambda: K.matmul_numpy(a, w)),
        ("noisy_errors", lambda: K.noisy_errors_numba(labels, post, nf, ng, 0.0, 0.0),
         lambda: K.noisy_errors_numpy(labels, post, nf, ng, 0.0, 0.0)),
    ]
    print(f"{'kernel':<14}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  bitwise")
    for name, fast, slow in cases:
        same = np.array_equal(np.asarray(fast()), np.asarray(slow()))
        tf = best_of(fast, args.repeat)
        ts = best_of(slow, args.repeat)
        print(f"{name:<14}{tf * 1e3:10.3f}{ts * 1e3:10.3f}{ts / tf:9.1f}  {same}")
    print(f"(BLAS matmul for reference: {best_of(lambda: a @ w, args.repeat) * 1e3:.3f} ms; "
          "not row-stable, so unused)")


if __name__ == "__main__":
    main()
