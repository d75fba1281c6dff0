"""Benchmark the numpy and compiled kernel backends.

Usage: python3 benchmarks/bench_kernels.py [N_POINTS]

Times the six kernel entry points on identical inputs and reports the
per-call mean over REPEATS runs plus the native speedup.
"""

import sys
import time

import numpy as np

from fieldslam.kernels import available_backends, get_backend

REPEATS = 7


def _time(fn, *args):
    best = float("inf")
    for _ in range(REPEATS):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 100_000
    rng = np.random.default_rng(0)
    table = rng.normal(size=(64, 64, 32))
    x0 = rng.uniform(0, 63, n)
    x1 = rng.uniform(0, 63, n)
    up2 = rng.normal(size=(n, 32))
    levels, size, channels = 16, 1 << 15, 2
    tables = rng.normal(size=(levels, size, channels))
    pos = rng.uniform(0, 1, size=(n, 3))
    res = np.unique(np.geomspace(16, 512, levels).astype(np.int64))
    res = np.resize(res, levels).astype(np.int64)
    up3 = rng.normal(size=(n, levels * channels))

    cases = [
        ("bilinear_forward", (table, x0, x1)),
        ("bilinear_backward", (np.zeros_like(table), x0, x1, up2)),
        ("bilinear_input_grad", (table, x0, x1, up2)),
        ("hashgrid_forward", (tables, pos, res)),
        ("hashgrid_backward", (np.zeros_like(tables), pos, res, up3)),
        ("hashgrid_input_grad", (tables, pos, res, up3)),
    ]

    backends = available_backends()
    print(f"{n} points, best of {REPEATS} runs")
    header = f"{'kernel':24}" + "".join(f"{b:>12}" for b in backends)
    if "native" in backends:
        header += f"{'speedup':>10}"
    print(header)
    for name, args in cases:
        times = {}
        for backend_name in backends:
            fn = getattr(get_backend(backend_name), name)
            times[backend_name] = _time(fn, *args)
        row = f"{name:24}" + "".join(
            f"{times[b] * 1e3:10.2f}ms" for b in backends)
        if "native" in times:
            row += f"{times['numpy'] / times['native']:9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
