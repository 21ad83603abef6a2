"""Estimated CATE bounds next to the true sharp bounds on the benchmark design.

The outcome depends on the first covariate only, so the script prints the
bounds along a slice ``x = (t, 0, 0, 0, 0)``.  At ``lambda = 1`` the interval
collapses to a point estimate of the CATE; larger sensitivity levels widen it.

Run with ``python demos/bounds_vs_truth.py``.
"""

from __future__ import annotations

import argparse

import numpy as np

from cate_bounds import BLearnerConfig, fit_blearner
from cate_bounds.dgp import sample_synthetic, true_bound, true_cate
from cate_bounds.domain import LOWER, UPPER, from_log_lambda


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=4000, help="training size")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    ds = sample_synthetic(args.n, args.seed)
    grid = np.zeros((9, 5))
    grid[:, 0] = np.linspace(-1.6, 1.6, 9)
    print(f"training on n={ds.n}; slice along the first covariate\n")

    for log_lam in (0.0, 0.5, 1.0):
        s = from_log_lambda(log_lam)
        bounds = fit_blearner(ds, s, BLearnerConfig(seed=args.seed)).predict(grid)
        lo_true, hi_true = true_bound(grid, s, LOWER), true_bound(grid, s, UPPER)
        print(f"log lambda = {log_lam:.1f}")
        print("    x0    cate   est.lower  true.lower   est.upper  true.upper")
        for i, x0 in enumerate(grid[:, 0]):
            print(f"{x0:6.2f} {true_cate(grid[i:i + 1])[0]:7.2f} {bounds.lower[i]:11.2f} {lo_true[i]:11.2f} "
                  f"{bounds.upper[i]:11.2f} {hi_true[i]:11.2f}")
        width = np.mean(bounds.upper - bounds.lower)
        print(f"mean estimated width {width:.2f}, true {np.mean(hi_true - lo_true):.2f}\n")


if __name__ == "__main__":
    main()
