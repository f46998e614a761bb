"""Compare the compiled kernels against the pure Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one row per kernel with the best-of-N time per call for each
backend and the speedup. Exits early if the extension is not built.
"""
import argparse
import timeit

import numpy as np

from xprs import _kernels_py as py

try:
    from xprs import _ckernels as cy
except ImportError:
    cy = None


def cases(rng):
    mat = rng.standard_normal((50, 1024))
    q = rng.standard_normal(1024)
    scores = mat @ q
    recency = np.arange(50, dtype=np.int64)
    canvas = rng.uniform(0, 255, (224, 224, 3))
    color = np.array([200.0, 40.0, 40.0])
    eff = np.array([0.3, 0.4, 0.1])
    goal = np.array([0.7, 0.6, 0.1])
    action = np.array([0.004, 0.002, 0.0, 0.0, 0.0, 0.0, 4.0])
    chunk = (eff, eff.copy(), goal, action, 100, 0, 0.1, 0.05, 1.0, 2.0, 0.05, 100, 0.0, 1.0, False)
    return {
        "dot_scores 50x1024": lambda m: m.dot_scores(mat, q),
        "top_k_order k=5 of 50": lambda m: m.top_k_order(scores, recency, 5),
        "paint_disk r=14 ring": lambda m: m.paint_disk(canvas, 112.0, 90.0, 14.0, color, 4.0),
        "run_chunk 100 steps": lambda m: m.run_chunk(*chunk),
    }


def best(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if cy is None:
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'python (us)':>14}{'cython (us)':>14}{'speedup':>10}")
    for name, call in cases(rng).items():
        t_py = best(lambda: call(py), args.repeat)
        t_cy = best(lambda: call(cy), args.repeat)
        print(f"{name:<24}{t_py * 1e6:>14.2f}{t_cy * 1e6:>14.2f}{t_py / t_cy:>9.1f}x")


if __name__ == "__main__":
    main()
