"""
Synthetic control
=================

The treated county is an exact convex mix of three donors.  The inner
problem finds donor weights for given covariate weights V; the outer search
tunes V for pre-treatment fit.
"""

import numpy as np

from policyeval import CovariateWeights, solve_inner, solve_outer, to_rates
from policyeval.simulate import simulate_sc_panel
from policyeval.synth import covariate_matrix

panel, table, spec, w_true = simulate_sc_panel(
    n_donors=10, seed=2, effect=1.5e-3)
donors = list(panel.unit_ids[1:])
names = list(table.covariate_names)
x1, x0 = covariate_matrix(table, "Treated", donors, names)

# inner problem only, with equal covariate weights
w = solve_inner(x1, x0, np.full(len(names), 1 / len(names)), donor_ids=donors)
print("objective", w.objective, "gap", w.gap)
print("largest weights", sorted(w.to_dict().items(), key=lambda t: -t[1])[:3])
print("true weights   ", {d: round(float(v), 3) for d, v in zip(donors, w_true) if v > 0})

series = to_rates(panel)
sol = solve_outer(series[0], series[1:], x1, x0, spec,
                  v_init=CovariateWeights.uniform(names), budget=200, seed=0)
print("V", {k: round(v, 3) for k, v in sol.v.to_dict().items()})
print("pre-period MSPE", sol.pre_mspe, "after", len(sol.evaluations), "evaluations")
print(sol.tau_fit.table(clustered=False))
print("injected effect -1.5e-3, estimate", sol.tau_fit.tau)
