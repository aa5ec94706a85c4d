#!/usr/bin/env python3
"""Benchmark the compiled kernels against the pure-Python fallback.

Usage: python benchmarks/bench_kernels.py [--rays N] [--records N] [--tris N]
"""

import argparse
import time

import numpy as np

from cospace.kernels import pure

try:
    from cospace.kernels import _native as native
except ImportError:
    native = None


def timeit(fn, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_raycast(impl, rays, mesh):
    def run():
        for origin, direction in rays:
            impl.ray_mesh_hit(origin, direction, mesh, 1e-6)

    return timeit(run)


def bench_codec(impl, records):
    blob = impl.encode_records(records)

    def run():
        impl.decode_records(impl.encode_records(records))

    run()
    return timeit(run), len(blob)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--rays", type=int, default=2000)
    parser.add_argument("--records", type=int, default=20000)
    parser.add_argument("--tris", type=int, default=500)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    mesh = rng.uniform(-5, 5, size=9 * args.tris).astype(np.float64)
    rays = []
    for _ in range(args.rays):
        d = rng.normal(size=3)
        rays.append((tuple(rng.uniform(-5, 5, size=3)), tuple(d / np.linalg.norm(d))))
    records = []
    for _ in range(args.records):
        vals = [float(np.float32(v)) for v in rng.uniform(-100, 100, size=10)]
        records.append((int(rng.integers(0, 2**32)), *vals, int(rng.integers(0, 8))))

    impls = [("pure", pure)] + ([("native", native)] if native else [])
    print(f"{'kernel':<26} {'backend':<8} {'best time':>12} {'throughput':>18}")
    print("-" * 68)
    results = {}
    for name, impl in impls:
        t = bench_raycast(impl, rays, mesh)
        results[("raycast", name)] = t
        print(f"{'ray_mesh_hit (%d tris)' % args.tris:<26} {name:<8} "
              f"{t * 1e3:>10.2f}ms {args.rays / t:>14.0f} rays/s")
    for name, impl in impls:
        t, size = bench_codec(impl, records)
        results[("codec", name)] = t
        print(f"{'codec round trip':<26} {name:<8} "
              f"{t * 1e3:>10.2f}ms {size / t / 2**20:>12.1f} MiB/s")
    if native:
        for kernel in ("raycast", "codec"):
            speedup = results[(kernel, "pure")] / results[(kernel, "native")]
            print(f"{kernel}: native is {speedup:.1f}x faster")


if __name__ == "__main__":
    main()
