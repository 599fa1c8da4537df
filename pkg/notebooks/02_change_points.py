"""
Change points in a cumulative count curve
=========================================

The detector fits a continuous piecewise-linear trend with an exact dynamic
program and picks the number of knots by BIC.  The slope of the last segment
is what the donor screen compares across counties.
"""

import numpy as np

from policyeval import detect_knots, last_segment_trend
from policyeval.oracle import enumerate_knots

rng = np.random.default_rng(3)
x = np.arange(30, dtype=float)
truth = 2.0 + 0.4 * x + 2.1 * np.maximum(x - 11, 0) - 1.2 * np.maximum(x - 22, 0)
y = truth + rng.normal(scale=0.6, size=x.size)

report = detect_knots(y, max_knots=4, criterion="bic")
print("knots at", report.knot_indices, "penalty per knot", round(report.penalty, 3))
for seg in report.segment_fits:
    print(seg)

trend = last_segment_trend(y, report)
print("last segment slope", trend)

# with a fixed penalty the dynamic program agrees with brute force
knots, obj = enumerate_knots(y[:20], 2, penalty=3.0)
dp = detect_knots(y[:20], 2, criterion=3.0)
print("enumeration", knots, round(obj, 6), "| dp", dp.knot_indices, round(dp.objective, 6))

# fitted curve, for plotting next to the data
fitted = report.fitted(x)
print(np.round(np.c_[y, fitted][::5], 2))
