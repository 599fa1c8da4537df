"""
Negative binomial regression for covariate weights
==================================================

Regress county case counts on demographic covariates, keep the significant
ones and turn their coefficients into synthetic-control covariate weights.
"""

import numpy as np

from policyeval import fit_nb, select_covariates, v_from_coefficients

rng = np.random.default_rng(11)
n = 400
names = ["males", "juveniles", "population_density", "poverty"]
Z = rng.normal(size=(n, len(names)))
log_pop = rng.uniform(9, 13, size=n)
beta = np.array([0.4, -0.3, 0.0, 0.6])
mu = np.exp(-6.0 + log_pop + Z @ beta)
k = 1.5
y = rng.negative_binomial(k, k / (k + mu))

fit = fit_nb(y, Z, offset=log_pop, names=names)
print(fit.table())
print("dispersion k", round(fit.k, 3), "converged", fit.converged)

chosen = select_covariates(fit, alpha=0.05)
print("selected", chosen)
v = v_from_coefficients(fit, chosen)
print("covariate weights", v.to_dict())

# a huge fixed dispersion is the Poisson model
pois = fit_nb(y, Z, offset=log_pop, names=names, dispersion=1e8)
print("poisson-limit coefficients", np.round(pois.params, 4))
