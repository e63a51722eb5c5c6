"""Ray-casting throughput: numba kernel vs the pure-numpy fallback.

    python benchmarks/bench_kernels.py --grid 64 --rays 200000 --repeat 3
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from occsphere import kernels


def make_case(n: int, rays: int, density: float, seed: int):
    rng = np.random.default_rng(seed)
    labels = (rng.random((n, n, n // 4)) < density).astype(np.uint8) * rng.integers(1, 18, (n, n, n // 4),
                                                                                      dtype=np.uint8)
    vs = 0.5
    origin = np.zeros(3)
    ext = np.array(labels.shape) * vs
    ray_o = rng.uniform(-0.1, 1.1, (rays, 3)) * ext
    ray_d = rng.normal(size=(rays, 3))
    ray_d /= np.linalg.norm(ray_d, axis=1, keepdims=True)
    return labels, origin, vs, ray_o, ray_d


def bench(name, case, repeat):
    with kernels.use_backend(name):
        kernels.cast_rays(*case)  # warm-up / compile
        best = float("inf")
        for _ in range(repeat):
            t = time.perf_counter()
            out = kernels.cast_rays(*case)
            best = min(best, time.perf_counter() - t)
    return best, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", type=int, default=64)
    ap.add_argument("--rays", type=int, default=100_000)
    ap.add_argument("--density", type=float, default=0.02)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    case = make_case(args.grid, args.rays, args.density, args.seed)
    results = {}
    for name in kernels.available_backends():
        secs, out = bench(name, case, args.repeat)
        results[name] = out
        print(f"{name:6s} {secs * 1e3:9.1f} ms  {args.rays / secs / 1e6:7.2f} Mray/s")
    if len(results) == 2:
        (la, da), (lb, db) = results.values()
        same = np.array_equal(la, lb) and np.array_equal(da, db)
        print(f"outputs identical: {same}")


if __name__ == "__main__":
    main()
