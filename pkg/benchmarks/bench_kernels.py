"""Benchmark the compiled farthest point sampling kernel against the numpy
fallback on frame sizes the ingest pipeline actually sees.

Usage: python benchmarks/bench_kernels.py [--repeats 50]
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from mmhar import kernels  # noqa: E402

CASES = [
    # (points per frame, target), spanning real frame statistics up to the
    # synthetic generator's densest source.
    (80, 64),
    (112, 64),
    (256, 64),
    (1024, 64),
    (4096, 512),
]


def bench(backend, pts, m, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        kernels.fps_indices(pts, m, backend=backend)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=50)
    args = parser.parse_args()

    backends = kernels.available_backends()
    print(f"available backends: {', '.join(backends)} (default: {kernels.BACKEND})")
    if "cython" not in backends:
        print("compiled kernel not built; run `python setup.py build_ext --inplace`")
    header = f"{'N':>6} {'M':>6}" + "".join(f" {b:>12}" for b in backends)
    if len(backends) == 2:
        header += f" {'speedup':>9}"
    print(header)
    rng = np.random.default_rng(0)
    for n, m in CASES:
        pts = rng.normal(size=(n, 3))
        times = {b: bench(b, pts, m, args.repeats) for b in backends}
        row = f"{n:>6} {m:>6}" + "".join(f" {times[b] * 1e6:>10.1f}us" for b in backends)
        if "cython" in times and "numpy" in times:
            row += f" {times['numpy'] / times['cython']:>8.1f}x"
        print(row)
        for a in backends:
            for b in backends:
                assert np.array_equal(
                    kernels.fps_indices(pts, m, backend=a), kernels.fps_indices(pts, m, backend=b)
                ), "backends disagree"


if __name__ == "__main__":
    main()
