"""Time the compiled and pure-numpy SSIM kernels on the same query/pool pairs.

Usage: python benchmarks/bench_ssim.py [--pool 1200] [--repeat 5]
"""

import argparse
import time

import numpy as np

from fedcase import kernels
from fedcase.retrieval import SSIM_C1, SSIM_C2, SSIM_WINDOW


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pool", type=int, default=1200)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    query = rng.integers(0, 256, (args.size, args.size), dtype=np.uint8)
    pool = rng.integers(0, 256, (args.pool, args.size, args.size), dtype=np.uint8)
    rows = []

    def run(impl):
        return lambda: impl(query, pool, SSIM_WINDOW, SSIM_C1, SSIM_C2)

    t_py, ref = best_of(run(kernels.python_ssim_maps), args.repeat)
    rows.append(("python", t_py))
    if kernels.compiled_ssim_maps is None:
        print("compiled kernel not built; only the numpy fallback was timed")
    else:
        t_c, out = best_of(run(kernels.compiled_ssim_maps), args.repeat)
        rows.append(("cython", t_c))
        same = np.array_equal(out, ref)
        print(f"outputs bitwise identical: {same}")
    print(f"pool={args.pool} images of {args.size}x{args.size}, best of {args.repeat}")
    for name, t in rows:
        print(f"  {name:7s} {t * 1e3:9.2f} ms   {args.pool / t:10.0f} images/s")
    if len(rows) == 2:
        print(f"  speedup {rows[0][1] / rows[1][1]:.1f}x")


if __name__ == "__main__":
    main()
