"""Synthetic panels with a known treatment effect, for tests and walkthroughs."""

from __future__ import annotations

import datetime as dt

import numpy as np

from .ingest import CovariateTable
from .panel import PanelDataset, TreatmentSpec

DEFAULT_SPEC = dict(
    issue_date=dt.date(2020, 4, 2),
    effective_start=dt.date(2020, 4, 6),
    effective_end=dt.date(2020, 5, 7),
    post_lag_days=7,
)


def _dates(first: dt.date, last: dt.date):
    return [first + dt.timedelta(days=i) for i in range((last - first).days + 1)]


def simulate_did_panel(n_units: int = 20, effect: float = 1e-3, seed: int = 0,
                       first_date: dt.date = dt.date(2020, 3, 10),
                       last_date: dt.date = dt.date(2020, 5, 21),
                       knot_date: dt.date = dt.date(2020, 3, 22),
                       slopes: tuple = (3e-4, 2e-3),
                       population: tuple = (5_000_000, 20_000_000),
                       treated: str = "Treated"):
    """Panel whose units share a common rate path, with the treated unit's rate
    lowered by ``effect`` on every date in the treatment window.

    The common path is piecewise linear in the per-capita rate (slopes before
    and after ``knot_date``), each unit has its own starting level, and daily
    new cases are Poisson.  The drop must stay below one day's growth so the
    cumulative counts remain monotone.

    Returns
    -------
    (PanelDataset, TreatmentSpec)
    """
    rng = np.random.default_rng(seed)
    dates = _dates(first_date, last_date)
    spec = TreatmentSpec(treated, **DEFAULT_SPEC)
    x = np.array([(d - first_date).days for d in dates], dtype=float)
    xk = (knot_date - first_date).days
    common = slopes[0] * x + (slopes[1] - slopes[0]) * np.maximum(x - xk, 0.0)
    daily = np.diff(common, prepend=0.0)
    if effect >= slopes[1]:
        raise ValueError("effect must be smaller than the daily growth after the knot")

    names = [treated] + [f"County {i:02d}" for i in range(1, n_units)]
    pops = rng.integers(population[0], population[1], size=n_units)
    window = np.array([spec.effective_start <= d <= spec.treatment_last_day for d in dates])
    cases = np.zeros((n_units, len(dates)), dtype=np.int64)
    for u in range(n_units):
        level = rng.uniform(1e-4, 1e-3)
        new = rng.poisson(pops[u] * daily)
        new[0] = rng.poisson(pops[u] * level)
        cum = np.cumsum(new)
        if u == 0:
            cum = cum - np.where(window, int(round(effect * pops[u])), 0)
        cases[u] = cum
    order = np.argsort(names)
    panel = PanelDataset([names[i] for i in order], dates, cases[order], pops[order],
                         [f"{5000 + i:05d}" for i in order])
    return panel, spec


def simulate_sc_panel(n_donors: int = 12, weights=None, seed: int = 0, effect: float = 0.0,
                      first_date: dt.date = dt.date(2020, 3, 10),
                      last_date: dt.date = dt.date(2020, 5, 21),
                      treated: str = "Treated"):
    """Panel and covariates where the treated unit is an exact convex mix of donors.

    Donor rates are ``common(t) * (1 + effects . covariates)`` so covariates
    that match also match the rates.  Three covariates drive the rates and a
    fourth is noise.  The treated unit gets a very large population so that
    rounding counts to integers leaves its rates exact to ~1e-9.  ``effect``
    is subtracted from the treated rate over the treatment window.

    Returns
    -------
    (PanelDataset, CovariateTable, TreatmentSpec, np.ndarray)
        The last item is the true donor weight vector.
    """
    rng = np.random.default_rng(seed)
    dates = _dates(first_date, last_date)
    spec = TreatmentSpec(treated, **DEFAULT_SPEC)
    x = np.array([(d - first_date).days for d in dates], dtype=float)
    common = 1e-4 + 4e-4 * x + 6e-4 * np.maximum(x - 12, 0.0)
    names_cov = ("males", "juveniles", "population_density", "noise")
    effects = np.array([0.25, -0.2, 0.3, 0.0])
    Z = rng.uniform(-1.0, 1.0, size=(4, n_donors))
    scale = 1.0 + effects @ Z
    donor_pop = rng.integers(2_000_000, 8_000_000, size=n_donors)
    donor_cases = np.round(np.outer(scale, common) * donor_pop[:, None]).astype(np.int64)
    donor_cases = np.maximum.accumulate(donor_cases, axis=1)
    donor_rates = donor_cases / donor_pop[:, None]

    if weights is None:
        weights = np.zeros(n_donors)
        idx = rng.choice(n_donors, size=3, replace=False)
        weights[idx] = rng.dirichlet(np.ones(3))
    weights = np.asarray(weights, dtype=float)
    t_pop = 1_000_000_000
    window = np.array([spec.effective_start <= d <= spec.treatment_last_day for d in dates])
    t_rates = weights @ donor_rates - effect * window
    t_cases = np.maximum.accumulate(np.round(t_rates * t_pop).astype(np.int64))

    donor_names = [f"County {i:02d}" for i in range(1, n_donors + 1)]
    panel = PanelDataset([treated] + donor_names, dates,
                         np.vstack([t_cases, donor_cases]),
                         np.concatenate([[t_pop], donor_pop]),
                         [f"{5000 + i:05d}" for i in range(n_donors + 1)])
    cov = np.column_stack([Z @ weights, Z])
    table = CovariateTable([treated] + donor_names, names_cov, cov)
    return panel, table, spec, weights


def write_inputs(panel: PanelDataset, directory, state: str = "Arkansas",
                 covariates: CovariateTable | None = None) -> dict:
    """Write a panel (and optional covariates) as the raw input files the
    pipeline expects: NYT-style cases, a population table and a covariate CSV.

    Returns a dict of config keys to the written paths.
    """
    from pathlib import Path

    from .ingest import write_case_csv, write_population_csv

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"case_csv": str(d / "cases.csv"), "population_csv": str(d / "population.csv")}
    write_case_csv(panel, paths["case_csv"], state)
    write_population_csv(panel, paths["population_csv"])
    if covariates is not None:
        paths["covariate_csv"] = str(d / "covariates.csv")
        with open(paths["covariate_csv"], "w", encoding="utf-8") as fh:
            fh.write(",".join(("county",) + covariates.covariate_names) + "\n")
            for j, u in enumerate(covariates.unit_ids):
                fh.write(",".join([u] + [repr(float(v)) for v in covariates.values[:, j]]) + "\n")
    return paths
