"""Time the gated-sum kernel on both backends and one full bag inference.

Usage: python benchmarks/bench_kernels.py [--labels N] [--d-r D] [--repeat R]
"""
import argparse
import time

import numpy as np

from vrcoloc import kernels
from vrcoloc.similarity import RelationScorer, init_relation_net
from vrcoloc.solver import InferenceConfig, LabelingProblem, greedy_infer


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--labels", type=int, default=380, help="labels per image (p(p-1))")
    ap.add_argument("--d-r", type=int, default=64)
    ap.add_argument("--bag", type=int, default=4)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    params = init_relation_net(args.d_r, seed=0)
    A = rng.normal(size=(args.labels, args.d_r))
    B = rng.normal(size=(args.labels, args.d_r))
    embs = [rng.normal(size=(args.labels, args.d_r)) for _ in range(args.bag)]

    print(f"{args.labels} x {args.labels} block, d_r={args.d_r}, bag of {args.bag}")
    print(f"{'backend':<8} {'block (ms)':>11} {'bag (s)':>9}")
    results = {}
    for backend in kernels.available_backends():
        scorer = RelationScorer(params, backend=backend)
        block = best_of(lambda: scorer.matrix(A, B), args.repeat)
        bag = best_of(lambda: greedy_infer(LabelingProblem(embs, scorer), InferenceConfig()),
                      max(1, args.repeat // 2))
        results[backend] = scorer.matrix(A, B)
        print(f"{backend:<8} {1e3 * block:>11.1f} {bag:>9.2f}")
    if len(results) == 2:
        diff = np.max(np.abs(results["cython"] - results["python"]))
        print(f"max |cython - python| = {diff:.2e}")


if __name__ == "__main__":
    main()
