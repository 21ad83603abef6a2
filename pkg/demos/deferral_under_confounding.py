"""Treatment recommendations that defer to an expert when the bounds straddle zero.

Data come from a generator with a hidden binary confounder whose effect on
treatment odds is exactly ``lambda* = e``.  Bounds fitted at that level are
used to recommend treatment (interval above zero), control (below zero), or
deferral.  Deferring more of the ambiguous points lowers the error rate on
the points that remain.

Run with ``python demos/deferral_under_confounding.py``.
"""

from __future__ import annotations

import argparse

from cate_bounds import config as C
from cate_bounds.experiments import cmd_defer


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--reps", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    cfg = C.resolve("defer", {"reps": args.reps, "seed": args.seed, "deferral_step": 0.1})
    table = cmd_defer(cfg)

    print(f"{args.reps} replications, training n={cfg['data']['n']}, test n={cfg['n_test']}\n")
    print("deferral   error rate")
    for k in range(11):
        tag = f"{k / 10:.2f}"
        errs = [r.value for r in table.select(metric=f"error_rate@{tag}")]
        print(f"{tag:>8} {sum(errs) / len(errs):12.3f}")
    share = [r.value for r in table.select(metric="policy_deferral_rate")]
    print(f"\nintervals straddling zero: {100 * sum(share) / len(share):.1f}% of test points")


if __name__ == "__main__":
    main()
