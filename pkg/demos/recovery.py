"""Draw choices from a known linear utility and check how well the MNL recovers it.

Run from the repository root:  python3 demos/recovery.py [n_seeds]

The generator scores price and trip duration after scaling them with the fixed
feature ranges, while the fitted model scales with the training min/max, so the
fitted coefficients are mapped back before comparing. The spread across seeds
shows the sampling noise of the estimate at this sample size.
"""

import sys

import numpy as np

from ptrchoice.data import TABLE1_FEATURES
from ptrchoice.datagen import GeneratorConfig, generate_dataset, linear_utility
from ptrchoice.mnl import MNLDesign, MNLFitConfig, fit_mnl
from ptrchoice.preprocess import encode_dataset, fit_preprocessor

truth = {"price": -2.0, "trip_duration": -1.0}
n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 3

estimates = []
for seed in range(n_seeds):
    cfg = GeneratorConfig(n_sessions=5000, min_alternatives=10, max_alternatives=10, utility=linear_utility(**truth), seed=seed)
    data = generate_dataset(cfg)
    p = fit_preprocessor(data)
    params, report = fit_mnl(encode_dataset(p, data), MNLDesign.from_preprocessor(p), MNLFitConfig(tol=1e-10, max_iters=20000))
    coef = params.coefficients()
    row = []
    for name in truth:
        lo, hi = TABLE1_FEATURES[name][2]
        row.append(coef[name] * (hi - lo) / (p.stats[name].max - p.stats[name].min))
    estimates.append(row)
    print(f"seed {seed}: price {row[0]:+.3f}  trip_duration {row[1]:+.3f}  ({report.iterations} iterations)")

est = np.array(estimates)
print(f"\ntruth:  price {truth['price']:+.3f}  trip_duration {truth['trip_duration']:+.3f}")
print(f"mean:   price {est[:, 0].mean():+.3f}  trip_duration {est[:, 1].mean():+.3f}")
if n_seeds > 1:
    sd = est.std(axis=0, ddof=1)
    print(f"sd:     price {sd[0]:.3f}  trip_duration {sd[1]:.3f}")
