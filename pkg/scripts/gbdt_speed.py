"""Training time of the GBDT learner versus rows and features.

Usage: python3 scripts/gbdt_speed.py [--rounds 50]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from mtfusion import gbdt
from mtfusion.gbdt import GbdtParams


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rounds", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    params = GbdtParams(num_rounds=args.rounds, num_leaves=31, min_child_samples=20)
    # warm the compiled kernels so the first row is not dominated by compilation
    gbdt.train_regressor((rng.normal(size=(200, 4)), rng.normal(size=200)),
                         params=GbdtParams(num_rounds=2))
    print(f"{'rows':>7} {'feats':>5} {'regression s':>13} {'multiclass s':>13}")
    for n, d in ((2_000, 16), (10_000, 16), (10_000, 64), (40_000, 32)):
        x = rng.normal(size=(n, d))
        y = np.tanh(x[:, 0] + x[:, 1] * x[:, 2]) + rng.normal(0, .3, n)
        t0 = time.perf_counter()
        gbdt.train_regressor((x, y), params=params)
        t_reg = time.perf_counter() - t0
        labels = np.digitize(y, np.quantile(y, np.linspace(0, 1, 8)[1:-1]))
        t0 = time.perf_counter()
        gbdt.train_classifier((x, labels), params=params)
        t_clf = time.perf_counter() - t0
        print(f"{n:>7} {d:>5} {t_reg:>13.2f} {t_clf:>13.2f}")


if __name__ == "__main__":
    main()
