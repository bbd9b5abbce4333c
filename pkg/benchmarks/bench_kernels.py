"""Compare the compiled kernels with the pure-Python fallback.

    python benchmarks/bench_kernels.py --repeats 200
"""

import argparse
import time

import numpy as np

from clotvc import kernels


def timed(fn, args_list):
    start = time.perf_counter()
    for args in args_list:
        fn(*args)
    return (time.perf_counter() - start) / len(args_list)


def cases(rng, repeats):
    yield "sinkhorn 4x4 reg=0.1", "sinkhorn_log", [(rng.uniform(0, 2, (4, 4)), 0.1, 200, 1e-6)
                                                   for _ in range(repeats)]
    yield "sinkhorn 4x4 reg=0.01", "sinkhorn_log", [(rng.uniform(0, 2, (4, 4)), 0.01, 1000, 1e-6)
                                                    for _ in range(repeats)]
    yield "sinkhorn 16x16 reg=0.05", "sinkhorn_log", [(rng.uniform(0, 2, (16, 16)), 0.05, 1000, 1e-6)
                                                      for _ in range(max(1, repeats // 4))]
    for n in (100, 400):
        yield f"dtw {n}x{n}", "dtw", [(rng.uniform(size=(n, n)),) for _ in range(max(1, repeats // 20))]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=200)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    python = kernels.get_backend("python")
    try:
        cython = kernels.get_backend("cython")
    except ImportError:
        cython = None
        print("compiled extension not built; timing the fallback only")

    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<26}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for label, name, args_list in cases(rng, args.repeats):
        t_py = timed(getattr(python, name), args_list) * 1e3
        if cython is None:
            print(f"{label:<26}{t_py:>12.3f}{'-':>12}{'-':>10}")
            continue
        t_cy = timed(getattr(cython, name), args_list) * 1e3
        print(f"{label:<26}{t_py:>12.3f}{t_cy:>12.3f}{t_py / t_cy:>9.1f}x")


if __name__ == "__main__":
    main()
