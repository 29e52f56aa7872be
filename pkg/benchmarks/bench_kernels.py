"""Time the compiled and numpy kernel backends on the same inputs.

    python benchmarks/bench_kernels.py [--size 25] [--N 50] [--repeat 5]
"""

import argparse
import time

import numpy as np

from planmax import kernels
from planmax.maxent import neighbor_table


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases(size, N, M, rng):
    S = size * size
    r_path = -rng.uniform(0.1, 3.0, S)
    r_goal = -rng.uniform(0.1, 3.0, S)
    nbr = neighbor_table(size, size)
    s0 = (size // 2) * size + size // 2
    _, _, pi = kernels.solve_inferred(r_path, r_goal, nbr, N)
    goal = 0
    u = rng.random((M, N))
    x = rng.normal(size=(M, 24))
    centers = x[:10].copy()
    return {
        "solve_inferred": lambda: kernels.solve_inferred(r_path, r_goal, nbr, N),
        "solve_goal": lambda: kernels.solve_goal(r_path, nbr, goal, N),
        "propagate_inferred": lambda: kernels.propagate_inferred(pi, nbr, s0),
        "propagate_goal": lambda: kernels.propagate_goal(np.ascontiguousarray(pi[:, :, :4]), nbr, s0, goal),
        "sample_plans": lambda: kernels.sample_plans(pi, nbr, s0, u),
        "assign_nearest": lambda: kernels.assign_nearest(x, centers),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=25)
    ap.add_argument("--N", type=int, default=50)
    ap.add_argument("--M", type=int, default=1000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    results = {}
    for b in backends:
        kernels.use_backend(b)
        fns = cases(args.size, args.N, args.M, np.random.default_rng(0))
        results[b] = {name: _time(fn, args.repeat) for name, fn in fns.items()}
    names = list(results[backends[0]])
    print(f"grid {args.size}x{args.size}, N={args.N}, M={args.M}; best of {args.repeat} (ms)")
    print(f"{'kernel':<20}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for n in names:
        row = f"{n:<20}" + "".join(f"{results[b][n] * 1e3:12.3f}" for b in backends)
        if "cython" in results:
            row += f"{results['python'][n] / results['cython'][n]:11.1f}x"
        print(row)
    kernels.use_backend(backends[-1])


if __name__ == "__main__":
    main()
