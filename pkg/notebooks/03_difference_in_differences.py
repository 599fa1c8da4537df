"""
Donor screen and difference-in-differences
==========================================

Screen controls by how close their latest pre-treatment slope is to the
treated county's, then estimate the treatment effect with clustered errors.
"""

from policyeval import (Thresholds, build_design, detect_all_knots, double_difference, fit_ols,
                        screen_donors)
from policyeval.simulate import simulate_did_panel

effect = 1e-3
panel, spec = simulate_did_panel(n_units=20, effect=effect, seed=7)

reports = detect_all_knots(panel, spec, max_knots=4)
screen = screen_donors(panel, spec, reports, Thresholds(alpha=0.05, min_adj_r2=0.75))
print("treated slope", round(screen.treated_slope, 2))
for c in screen.candidates[:5]:
    print(f"  {c.unit_id}: slope {c.slope:.2f}  |dev| {c.abs_deviation:.2f}  adj R2 {c.adj_r_squared:.3f}")
print("excluded:", screen.excluded[:3])

donors = screen.unit_ids
fit = fit_ols(build_design(panel, spec, donors))
print(fit.table())
print(f"true effect {-effect:.2e}, estimate {fit.tau:.3e}")

# the interaction coefficient is the double difference of cell means
print("double difference", double_difference(panel, spec, donors))

# single-control comparisons have one cluster per unit, too few for CR1
single = fit_ols(build_design(panel, spec, donors[:1]))
print(single.table(clustered=False))
