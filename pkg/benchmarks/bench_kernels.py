"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--rows N] [--repeat R]

Each kernel is warmed up once (so JIT compilation is excluded), the outputs of
the two backends are checked for agreement, and the best of R runs is shown.
"""
import argparse
import timeit

import numpy as np

from multitsls import _kernels


def _inputs(rows, rng):
    codes = rng.integers(0, 50, rows).astype(np.int64)
    return {
        "group_demean": (rng.normal(size=(rows, 4)), codes, rng.uniform(0.5, 1.5, rows), 50),
        "score_outer": (rng.normal(size=(rows, 3)), rng.normal(size=(rows, 2)), rng.uniform(0.5, 1.5, rows)),
        "threshold_assignments": (np.linspace(0, 1, 1001), np.sort(rng.uniform(size=(max(rows // 1000, 25), 2)), axis=1)),
        "monotone_pairs": (rng.integers(0, 2, size=(200, 60, 3)).astype(np.int8),),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=200_000)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)

    rng = np.random.default_rng(0)
    inputs = _inputs(args.rows, rng)
    print(f"{'kernel':<24}{'numpy (ms)':>12}{'numba (ms)':>12}{'speedup':>10}")
    for name, (numpy_fn, numba_fn) in _kernels.IMPLEMENTATIONS.items():
        call = inputs[name]
        ref, out = numpy_fn(*call), numba_fn(*call)  # warm-up and JIT
        np.testing.assert_allclose(ref, out, rtol=1e-9, atol=1e-9)
        t_np = min(timeit.repeat(lambda: numpy_fn(*call), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: numba_fn(*call), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<24}{t_np:>12.2f}{t_nb:>12.2f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
