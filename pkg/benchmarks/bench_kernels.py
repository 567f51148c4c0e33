"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run:  python3 benchmarks/bench_kernels.py [--repeats N]
(import weedstem normally, so set WEEDSTEM_NO_NUMBA=1 to time numpy-only.)
"""
import argparse
import time

import numpy as np

from weedstem import backends


def _time(fn, *args, repeats=5):
    fn(*args)  # warm-up (numba compiles here)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 128, 128, 12))
    d2 = rng.normal(size=(8, 64, 64, 9 * 12))
    f = rng.normal(size=(8, 16, 16, 48))
    d1 = rng.normal(size=(8, 16, 16, 9 * 48))
    a = rng.uniform(0, 200, size=(300, 2))
    boxes_a = np.concatenate([a, a + rng.uniform(5, 50, size=a.shape)], axis=1)
    boxes_b = boxes_a[::-1].copy()

    cases = [
        ("im2col (stride 2)", "im2col", (x,)),
        ("col2im (stride 2)", "col2im", (d2, 128, 128, 12)),
        ("im2col (stride 1)", "im2col_s1", (f,)),
        ("col2im (stride 1)", "col2im_s1", (d1, 16, 16, 48)),
        ("iou_matrix 300x300", "iou_matrix", (boxes_a, boxes_b)),
    ]

    backend = "numba" if backends.USE_NUMBA else "numpy (fallback)"
    print(f"active backend: {backend}\n")
    print(f"{'kernel':<22} {'active (ms)':>12} {'numpy ref (ms)':>15} {'speedup':>9}")
    for label, name, call_args in cases:
        active = _time(getattr(backends, name), *call_args, repeats=args.repeats)
        ref = _time(backends.numpy_impls[name], *call_args, repeats=args.repeats)
        print(f"{label:<22} {active * 1e3:>12.2f} {ref * 1e3:>15.2f} {ref / active:>8.2f}x")


if __name__ == "__main__":
    main()
