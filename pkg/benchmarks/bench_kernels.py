"""Benchmark the compiled clustering kernels against the pure-Python fallback.

Runs the greedy capacity assignment and one swap-refinement pass on the
same synthetic workload with both backends, verifies the outputs are
bit-identical, and prints the timings.

Usage: python benchmarks/bench_kernels.py [--n 10000] [--k 500] [--dim 32]
"""

import argparse
import time

import numpy as np

from instill.cluster import (
    assign_with_capacity,
    draw_capacities,
    init_centers,
    refine,
)
from instill.kernels import get_backend


def run(backend: str, points, centers, caps, steps: int):
    t0 = time.perf_counter()
    plan = assign_with_capacity(points, centers, caps, backend=backend)
    t_assign = time.perf_counter() - t0
    t0 = time.perf_counter()
    refined = refine(plan, points, steps=steps, backend=backend)
    t_refine = time.perf_counter() - t0
    return plan, refined, t_assign, t_refine


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--n", type=int, default=10000)
    parser.add_argument("--k", type=int, default=500)
    parser.add_argument("--dim", type=int, default=32)
    parser.add_argument("--steps", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    try:
        get_backend("compiled")
    except ImportError:
        raise SystemExit("compiled kernels are not built; reinstall with Cython available")

    rng = np.random.default_rng(args.seed)
    points = rng.normal(size=(args.n, args.dim))
    points /= np.linalg.norm(points, axis=1, keepdims=True)
    caps = draw_capacities(args.n, args.k, 2, max(2, args.n // args.k * 2), seed=args.seed)
    centers = init_centers(points, args.k, seed=args.seed)

    print(f"workload: N={args.n}, K={args.k}, d={args.dim}, refine steps={args.steps}")

    # raw kernel timing: the greedy walk alone, without the shared argsort
    sim = points @ centers.T
    order = np.argsort(-sim, axis=None, kind="stable")
    for backend in ("compiled", "python"):
        greedy, _ = get_backend(backend)
        t0 = time.perf_counter()
        assignment = greedy(order, caps.c, args.n, args.k)
        t_kernel = time.perf_counter() - t0
        print(f"{backend:>8}: greedy walk over {order.size:,} pairs {t_kernel * 1e3:8.1f} ms")
        del assignment

    results = {}
    for backend in ("compiled", "python"):
        plan, refined, t_assign, t_refine = run(backend, points, centers, caps, args.steps)
        results[backend] = (plan, refined)
        print(
            f"{backend:>8}: assign stage {t_assign * 1e3:8.1f} ms   "
            f"refine stage {t_refine * 1e3:8.1f} ms   objective {refined.objective:.6f}"
        )

    same_assign = np.array_equal(
        results["compiled"][0].assignment, results["python"][0].assignment
    )
    same_refined = np.array_equal(
        results["compiled"][1].assignment, results["python"][1].assignment
    )
    same_objective = results["compiled"][1].objective == results["python"][1].objective
    if not (same_assign and same_refined and same_objective):
        raise SystemExit("backend outputs differ; the kernels are out of sync")
    print("backends produce bit-identical assignments and objectives")


if __name__ == "__main__":
    main()
