"""Compare the compiled and interpreted boosted-tree kernels.

The tree-fitting and prediction kernels are the hot region behind the
drift-correction fit; they run compiled under numba when available and
as plain Python otherwise.  This script times both backends on the same
inputs, reports cold (first call, including any compilation) and warm
timings, and checks that the two produce bit-identical outputs.

Input sizes default to values the interpreted path can finish quickly;
scale them up when only relative numbers matter.

Usage:
    python benchmarks/bench_kernels.py [--rows 80] [--features 6]
                                       [--trees 10] [--repeats 3]
"""

import argparse
import time

import numpy as np

from debatch import backend_name, set_backend
from debatch.bec import _gbt_fit_kernel, _gbt_predict_kernel


def _kernel_inputs(args):
    gen = np.random.default_rng(7)
    X = gen.standard_normal((args.rows, args.features))
    y = X[:, 0] * 0.6 + np.sin(X[:, 1]) + 0.3 * gen.standard_normal(args.rows)
    rows = np.stack([
        np.sort(gen.choice(args.rows, size=int(args.rows * 0.8), replace=False))
        for _ in range(args.trees)
    ]).astype(np.int64)
    return X, y, rows


def time_call(fn, repeats):
    """(cold, warm-median) wall times in seconds."""
    t0 = time.perf_counter()
    fn()
    cold = time.perf_counter() - t0
    warm = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        warm.append(time.perf_counter() - t0)
    return cold, float(np.median(warm))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=80)
    parser.add_argument("--features", type=int, default=6)
    parser.add_argument("--trees", type=int, default=10)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    X, y, rows = _kernel_inputs(args)

    results = {}
    outputs = {}
    for choice in ("numpy", "numba"):
        try:
            set_backend(choice)
        except ImportError:
            print(f"{choice}: not installed, skipping")
            continue
        name = backend_name()

        def run_fit():
            return _gbt_fit_kernel(X, y, rows, 3, 0.1)

        fit_cold, fit_warm = time_call(run_fit, args.repeats)
        feat, thr, val, base = run_fit()

        def run_predict():
            return _gbt_predict_kernel(feat, thr, val, base, 0.1, X)

        pred_cold, pred_warm = time_call(run_predict, args.repeats)

        results[name] = (fit_cold, fit_warm, pred_cold, pred_warm)
        outputs[name] = (feat, thr, val, base, run_predict())

    header = (f"{'backend':<8} {'fit cold':>11} {'fit warm':>11} "
              f"{'pred cold':>11} {'pred warm':>11}")
    print(header)
    print("-" * len(header))
    for name, (fc, fw, pc, pw) in results.items():
        print(f"{name:<8} {fc * 1000:>9.1f}ms {fw * 1000:>9.1f}ms "
              f"{pc * 1000:>9.1f}ms {pw * 1000:>9.1f}ms")

    if len(results) == 2:
        print(f"\nfit-kernel warm speedup (numpy/numba): "
              f"{results['numpy'][1] / results['numba'][1]:.0f}x")
        a, b = outputs["numpy"], outputs["numba"]
        identical = (
            np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
            and np.array_equal(a[2], b[2]) and a[3] == b[3]
            and np.array_equal(a[4], b[4])
        )
        print(f"backends bit-identical: {identical}")
        if not identical:
            raise SystemExit("backend outputs diverged")


if __name__ == "__main__":
    main()
