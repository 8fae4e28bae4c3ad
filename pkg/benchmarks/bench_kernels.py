"""Compare the compiled and pure-Python kernels.

    python3 benchmarks/bench_kernels.py [--n 200000]
"""

import argparse
import time

import numpy as np

from ksim import kernels


def _pmp_inputs(n: int, rng: np.random.Generator):
    lo = np.sort(rng.integers(0, 1 << 24, 16).astype(np.uint64))
    hi = lo + rng.integers(1, 1 << 16, 16).astype(np.uint64)
    perm = rng.integers(0, 8, 16).astype(np.uint8)
    addrs = rng.integers(0, 1 << 24, n).astype(np.uint64)
    lens = rng.choice([1, 2, 4, 8], n).astype(np.uint64)
    needs = rng.choice([1, 2, 4], n).astype(np.uint8)
    return lo, hi, perm, addrs, lens, needs


def bench_pmp(k, n: int) -> float:
    args = _pmp_inputs(n, np.random.default_rng(0))
    out = np.zeros(n, np.uint8)
    t = time.perf_counter()
    k.pmp_match_batch(*args, out)
    return time.perf_counter() - t


def bench_cache(k, n: int) -> float:
    sets, ways = 64, 16
    valid = np.zeros(sets * ways, np.uint8)
    tags = np.zeros(sets * ways, np.uint64)
    owner = np.zeros(sets * ways, np.int64)
    stamps = np.zeros(sets * ways, np.uint64)
    rng = np.random.default_rng(1)
    lines = rng.integers(0, 1 << 14, n)
    t = time.perf_counter()
    for clock, line in enumerate(lines.tolist(), 1):
        k.cache_access(valid, tags, owner, stamps, ways, line & (sets - 1), line >> 6, -1, 0xFFFF, clock)
    return time.perf_counter() - t


def main() -> None:
    p = argparse.ArgumentParser()
    p.add_argument("--n", type=int, default=200_000)
    args = p.parse_args()
    found = kernels.backends()
    print(f"selected backend: {kernels.BACKEND}")
    print(f"{'kernel':<22}" + "".join(f"{name:>14}" for name in found) + f"{'speedup':>10}")
    for label, fn in (("pmp_match_batch", bench_pmp), ("cache_access", bench_cache)):
        times = {name: fn(k, args.n) for name, k in found.items()}
        row = f"{label + f' x{args.n}':<22}" + "".join(f"{t * 1e3:>12.1f}ms" for t in times.values())
        if "cython" in times:
            row += f"{times['python'] / times['cython']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
