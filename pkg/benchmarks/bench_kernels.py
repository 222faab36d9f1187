"""Compiled vs numpy tree kernels on fitted synthetic-data models.

    python benchmarks/bench_kernels.py [--repeat 3]

Prints the best-of-N time per kernel and backend, and the speedup.
Traversal kernels run on 2000 rows, SHAP on 50.
"""

import argparse
import timeit

import numpy as np

from tabadv import _kernels_py as py
from tabadv.learners.trees import fit_gradient_boosting, fit_random_forest
from tabadv.synthetic import make_synthetic

try:
    from tabadv import _kernels as cy
except ImportError:  # extension not built
    cy = None


def cases():
    data = make_synthetic(4000, seed=0)
    X = data.rows[:2000]
    gb = fit_gradient_boosting(data, n_estimators=100, max_depth=3, learning_rate=0.1)
    rf = fit_random_forest(data, n_estimators=50, max_depth=8)
    for name, e in (("gb100/d3", gb), ("rf50/d8", rf)):
        left, right, feat, thr, val, wt, roots, depth = e.packed
        yield name, "ensemble_sum", lambda k: k.ensemble_sum(left, right, feat, thr, val, roots, X)
        yield name, "ensemble_apply", lambda k: k.ensemble_apply(left, right, feat, thr, roots, X)
        yield name, "ensemble_shap", lambda k: k.ensemble_shap(*e.packed, X[:50], e.n_features)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)
    print(f"{'model':<10s} {'kernel':<16s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, kernel, fn in cases():
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        if cy is None:
            print(f"{name:<10s} {kernel:<16s} {t_py:10.2f} {'n/a':>10s} {'':>8s}")
            continue
        np.testing.assert_allclose(fn(cy), fn(py), rtol=1e-9, atol=1e-12)
        t_cy = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<10s} {kernel:<16s} {t_py:10.2f} {t_cy:10.2f} {t_py / t_cy:7.1f}x")


if __name__ == "__main__":
    main()
