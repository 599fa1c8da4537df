"""Command-line pipeline: ingest, knots, select, did, covariates, synth, report, selftest.

Every stage reads its inputs from files written by the stage before it, into
``output_dir``, so a stage can be re-run on its own.  Configuration comes
from a TOML file whose keys can each be overridden by a ``--key value`` flag.

Exit codes are 0 for success (warnings included), 2 for bad input or
configuration and 3 for numerical failures.

Each ``cmd_*`` function takes a :class:`RunConfig` and returns a dict
summarising what it wrote, so the pipeline can also be driven from Python.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import json
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import oracle
from .changepoint import KnotReport, detect_knots
from .did import DegenerateDesignError, build_design, fit_ols, ols
from .ingest import (
    DEFAULT_COVARIATES,
    CompletenessIssue,
    CovariateTable,
    IngestError,
    read_case_csv,
    read_covariate_csv,
    read_population_csv,
    write_case_csv,
    write_completeness_report,
    write_population_csv,
)
from .nbglm import SeparationError, fit_nb, select_covariates, v_from_coefficients
from .panel import PanelDataset, TreatmentSpec, day_offsets, period_mask, to_rates
from .selection import DonorScreen, Thresholds, detect_all_knots, pre_treatment_series, screen_donors
from .synth import (
    CovariateWeights,
    covariate_matrix,
    inner_objective,
    solve_inner,
    solve_outer,
)

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger(__name__)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

COMMANDS = ("ingest", "knots", "select", "did", "covariates", "synth", "report", "selftest")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """A stage failed; carries the stage name and the exit code to use."""

    def __init__(self, stage: str, exc: BaseException, code: int):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage
        self.code = code


@dataclasses.dataclass(frozen=True)
class RunConfig:
    case_csv: str | None = None
    population_csv: str | None = None
    covariate_csv: str | None = None
    poverty_override: str | None = None
    state: str = "Arkansas"
    treated_unit: str = "Saline"
    issue_date: dt.date = dt.date(2020, 4, 2)
    effective_start: dt.date = dt.date(2020, 4, 6)
    effective_end: dt.date = dt.date(2020, 5, 7)
    post_lag_days: int = 7
    alpha: float = 0.05
    min_adj_r2: float = 0.75
    max_abs_dev: float | None = 1.0
    rate_scale: float = 1.0
    knot_scale: str = "counts"
    max_knots: int = 4
    knot_min_gap: int = 3
    criterion: str = "bic"
    include_post: bool = False
    repair: str = "clamp"
    covariates: tuple = DEFAULT_COVARIATES
    glm_alpha: float = 0.05
    glm_offset: bool = True
    sc_mode: str = "nested"
    sc_budget: int = 500
    sc_pool: str = "screened"
    output_dir: str = "out"
    seed: int = 0

    def __post_init__(self):
        for name in ("issue_date", "effective_start", "effective_end"):
            v = getattr(self, name)
            if isinstance(v, str):
                object.__setattr__(self, name, dt.date.fromisoformat(v))
        if isinstance(self.covariates, str):
            object.__setattr__(self, "covariates", tuple(c.strip() for c in self.covariates.split(",") if c.strip()))
        else:
            object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.knot_scale not in ("counts", "rates"):
            raise ConfigError("knot_scale must be 'counts' or 'rates'")
        if self.sc_mode not in ("fixed", "nested"):
            raise ConfigError("sc_mode must be 'fixed' or 'nested'")
        if self.sc_pool not in ("screened", "all"):
            raise ConfigError("sc_pool must be 'screened' or 'all'")
        if self.repair not in ("clamp", "fail"):
            raise ConfigError("repair must be 'clamp' or 'fail'")
        if not self.rate_scale > 0:
            raise ConfigError("rate_scale must be positive")

    @property
    def spec(self) -> TreatmentSpec:
        return TreatmentSpec(self.treated_unit, self.issue_date, self.effective_start,
                             self.effective_end, self.post_lag_days)

    @property
    def thresholds(self) -> Thresholds:
        # the screen itself keeps every candidate; max_abs_dev defines a sub-pool
        return Thresholds(self.alpha, self.min_adj_r2, None)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, dt.date):
                d[k] = v.isoformat()
            elif isinstance(v, tuple):
                d[k] = list(v)
        return d


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw):
    """Convert a flag string (or TOML value) to the type of field ``name``."""
    default = _FIELDS[name].default
    if raw is None or (isinstance(raw, str) and raw.lower() in ("none", "null", "")):
        return None
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        if str(raw).lower() in ("1", "true", "yes", "on"):
            return True
        if str(raw).lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            return int(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"{name}: expected an integer, got {raw!r}") from None
    if isinstance(default, float) or name == "max_abs_dev":
        try:
            return float(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"{name}: expected a number, got {raw!r}") from None
    if isinstance(default, dt.date):
        if isinstance(raw, dt.date):
            return raw
        try:
            return dt.date.fromisoformat(str(raw))
        except ValueError:
            raise ConfigError(f"{name}: expected an ISO date, got {raw!r}") from None
    return raw


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build a config from an optional TOML file plus overrides (flag values win).

    Relative paths in the file are resolved against the file's directory.
    """
    values: dict = {}
    base = None
    if path is not None:
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        unknown = sorted(set(data) - set(_FIELDS))
        if unknown:
            raise ConfigError(f"{path}: unknown keys {unknown}")
        base = path.parent
        values.update({k: _coerce(k, v) for k, v in data.items()})
    for k, v in (overrides or {}).items():
        if k not in _FIELDS:
            raise ConfigError(f"unknown key {k!r}")
        if v is not None:
            values[k] = _coerce(k, v)
    if base is not None:
        for k in ("case_csv", "population_csv", "covariate_csv", "poverty_override", "output_dir"):
            if k in values and values[k] and not Path(values[k]).is_absolute() and not (overrides or {}).get(k):
                values[k] = str(base / values[k])
    try:
        return RunConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------- file helpers

def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def _write_csv(path: Path, header: Sequence[str], rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _read_json(path: Path, stage: str):
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run the {stage!r} stage first")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _require(path, key: str) -> Path:
    if not path:
        raise ConfigError(f"config key {key!r} is required for this command")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{key} file {p} does not exist")
    return p


def _num(v: float) -> str:
    return repr(float(v))


def load_panel(cfg: RunConfig) -> PanelDataset:
    """Panel persisted by :func:`cmd_ingest`."""
    pop_path = cfg.out / "population.csv"
    panel_path = cfg.out / "panel.csv"
    for p in (pop_path, panel_path):
        if not p.exists():
            raise FileNotFoundError(f"{p} not found; run the 'ingest' stage first")
    return read_case_csv(panel_path, cfg.state, read_population_csv(pop_path), repair="fail")


def load_covariates(cfg: RunConfig) -> CovariateTable:
    return CovariateTable.from_dict(_read_json(cfg.out / "covariates.json", "ingest"))


def load_knots(cfg: RunConfig) -> dict:
    d = _read_json(cfg.out / "knots.json", "knots")
    return {u: (KnotReport.from_dict(r) if r is not None else None) for u, r in d["reports"].items()}


def load_screen(cfg: RunConfig) -> DonorScreen:
    return DonorScreen.from_dict(_read_json(cfg.out / "screen.json", "select"))


def _knot_rate_scale(cfg: RunConfig):
    return None if cfg.knot_scale == "counts" else cfg.rate_scale


# ---------------------------------------------------------------- stages

def cmd_ingest(cfg: RunConfig) -> dict:
    """Read the raw files and persist the canonical panel, populations,
    covariates and the completeness report."""
    case_path = _require(cfg.case_csv, "case_csv")
    pop_path = _require(cfg.population_csv, "population_csv")
    issues: list[CompletenessIssue] = []
    panel = read_case_csv(case_path, cfg.state, read_population_csv(pop_path), cfg.repair, issues)
    if cfg.treated_unit not in panel.unit_ids:
        raise ConfigError(f"treated unit {cfg.treated_unit!r} not in the {cfg.state} panel")
    table = None
    if cfg.covariate_csv:
        cov_path = _require(cfg.covariate_csv, "covariate_csv")
        override = _require(cfg.poverty_override, "poverty_override") if cfg.poverty_override else None
        table = read_covariate_csv(cov_path, cfg.covariates, override, units=panel.unit_ids)
        issues.extend(table.issues)
    # everything is read before anything is written, so a bad input leaves no partial outputs
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    write_case_csv(panel, out / "panel.csv", cfg.state)
    write_population_csv(panel, out / "population.csv")
    written = ["panel.csv", "population.csv"]
    n_cov = None
    if table is not None:
        _write(out / "covariates.json", _dump(table.to_dict()))
        written.append("covariates.json")
        n_cov = len(table.unit_ids)
    write_completeness_report(issues, out / "completeness.jsonl")
    written.append("completeness.jsonl")
    for i in issues:
        log.warning("%s: %s (%s)", i.unit, i.issue, i.action)
    return {"units": panel.n_units, "dates": panel.n_dates, "covariate_units": n_cov,
            "issues": len(issues), "written": written}


def cmd_knots(cfg: RunConfig) -> dict:
    """Change-points of every unit's pre-treatment series plus plot data."""
    panel = load_panel(cfg)
    spec = cfg.spec
    spec.check_panel(panel)
    rs = _knot_rate_scale(cfg)
    reports = detect_all_knots(panel, spec, cfg.max_knots, cfg.criterion, rs, min_gap=cfg.knot_min_gap)
    doc = {
        "knot_scale": cfg.knot_scale,
        "rate_scale": cfg.rate_scale,
        "criterion": cfg.criterion,
        "reports": {u: (r.to_dict() if r is not None else None) for u, r in reports.items()},
    }
    _write(cfg.out / "knots.json", _dump(doc))
    rows = []
    for u, r in reports.items():
        if r is None:
            continue
        dates, y = pre_treatment_series(panel, spec, u, rs)
        fitted = r.fitted(day_offsets(dates))
        knots = set(r.knot_indices)
        for j, (d, obs, fit) in enumerate(zip(dates, y, fitted)):
            rows.append([u, d.isoformat(), _num(obs), _num(fit), int(j in knots)])
    _write_csv(cfg.out / "knots_plot.csv", ["unit", "date", "observed", "fitted", "knot"], rows)
    skipped = sorted(u for u, r in reports.items() if r is None)
    return {"units": len(reports), "too_short": skipped, "written": ["knots.json", "knots_plot.csv"]}


def cmd_select(cfg: RunConfig) -> dict:
    """Donor screen from the persisted knot reports."""
    panel = load_panel(cfg)
    reports = load_knots(cfg)
    screen = screen_donors(panel, cfg.spec, reports, cfg.thresholds, _knot_rate_scale(cfg))
    doc = screen.to_dict()
    doc["within_max_abs_dev"] = screen.within(cfg.max_abs_dev) if cfg.max_abs_dev is not None else None
    _write(cfg.out / "screen.json", _dump(doc))
    screen.write_csv(cfg.out / "screen.csv")
    return {"candidates": screen.unit_ids, "warnings": list(screen.warnings),
            "written": ["screen.json", "screen.csv"]}


def did_pools(cfg: RunConfig, panel: PanelDataset, screen: DonorScreen) -> dict:
    """Donor pools for the DID stage, in a fixed order.

    Each screened candidate on its own, the candidates closer than
    ``max_abs_dev``, all candidates, and every other unit in the panel.
    """
    pools = {}
    for u in screen.unit_ids:
        pools[f"single:{u}"] = [u]
    if cfg.max_abs_dev is not None:
        within = screen.within(cfg.max_abs_dev)
        if within:
            pools[f"within:{cfg.max_abs_dev:g}"] = within
    if screen.unit_ids:
        pools["candidates"] = screen.unit_ids
    pools["all_others"] = [u for u in panel.unit_ids if u != cfg.treated_unit]
    return pools


def cmd_did(cfg: RunConfig, upstream: bool = True) -> dict:
    """DID regressions for every donor pool.

    With ``upstream`` the knot and screening stages are run first; otherwise
    their persisted outputs are used.
    """
    if upstream:
        _run_stage("knots", cmd_knots, cfg)
        _run_stage("select", cmd_select, cfg)
    panel = load_panel(cfg)
    screen = load_screen(cfg)
    spec = cfg.spec
    pools = did_pools(cfg, panel, screen)
    warnings = list(screen.warnings)
    if not screen.unit_ids:
        warnings.append("empty donor screen: only the all-other-units pool was estimated")
    fits, tables, rows = {}, [], []
    rates = {s.unit_id: s for s in to_rates(panel, cfg.rate_scale)}
    labels = period_mask(spec, panel.dates)
    for name, donors in pools.items():
        if not donors:
            continue
        fit = fit_ols(build_design(panel, spec, donors, cfg.include_post, cfg.rate_scale))
        fits[name] = {"donors": list(donors), "fit": fit.to_dict()}
        tables.append(f"== pool {name} ({len(donors)} donors)\n{fit.table()}\n")
        ctrl = np.mean([rates[d].rates for d in donors], axis=0)
        for d, lab, t, c in zip(panel.dates, labels, rates[cfg.treated_unit].rates, ctrl):
            rows.append([name, d.isoformat(), lab, _num(t), _num(c)])
    doc = {"treated_unit": cfg.treated_unit, "rate_scale": cfg.rate_scale,
           "include_post": cfg.include_post, "pools": fits, "warnings": warnings}
    _write(cfg.out / "did.json", _dump(doc))
    _write(cfg.out / "did_tables.txt", "\n".join(tables))
    _write_csv(cfg.out / "did_plot.csv", ["pool", "date", "period", "treated", "control_mean"], rows)
    for w in warnings:
        log.warning(w)
    return {"taus": {k: v["fit"]["tau"] for k, v in fits.items()}, "warnings": warnings,
            "written": ["did.json", "did_tables.txt", "did_plot.csv"]}


def _glm_units(cfg: RunConfig, panel: PanelDataset, table: CovariateTable) -> list[str]:
    return [u for u in panel.unit_ids if u in table.unit_ids]


def cmd_covariates(cfg: RunConfig) -> dict:
    """Negative-binomial GLM of pre-treatment counts on covariates, the
    significant covariates and the implied covariate weights."""
    panel = load_panel(cfg)
    table = load_covariates(cfg)
    spec = cfg.spec
    names = [c for c in cfg.covariates if c in table.covariate_names]
    missing = [c for c in cfg.covariates if c not in table.covariate_names]
    if missing:
        raise ConfigError(f"covariates {missing} are not in covariates.json")
    units = _glm_units(cfg, panel, table)
    t0 = sum(1 for d in panel.dates if d < spec.effective_start)
    if t0 == 0:
        raise ConfigError("no pre-treatment dates in the panel")
    idx = [panel.index(u) for u in units]
    response = panel.cumulative_cases[idx, t0 - 1]
    offset = np.log(panel.population[idx].astype(float)) if cfg.glm_offset else None
    sub = table.select(names=names, units=units)
    fit = fit_nb(response, sub, offset=offset)
    selected = select_covariates(fit, cfg.glm_alpha)
    warnings = []
    if not fit.converged:
        warnings.append("negative-binomial fit did not converge")
    if not selected:
        warnings.append(f"no covariate significant at level {cfg.glm_alpha}")
    v = v_from_coefficients(fit, selected).to_dict() if selected else None
    doc = {"fit": fit.to_dict(), "selected": selected, "v": v, "units": units,
           "response_date": panel.dates[t0 - 1].isoformat(), "warnings": warnings}
    _write(cfg.out / "nbglm.json", _dump(doc))
    _write(cfg.out / "nbglm_table.txt", fit.table() + "\n")
    return {"selected": selected, "converged": fit.converged, "warnings": warnings,
            "written": ["nbglm.json", "nbglm_table.txt"]}


def cmd_synth(cfg: RunConfig) -> dict:
    """Synthetic control from the covariate weights of the GLM stage."""
    panel = load_panel(cfg)
    table = load_covariates(cfg)
    glm = _read_json(cfg.out / "nbglm.json", "covariates")
    if not glm["selected"]:
        raise ConfigError(
            "no covariate was selected by the GLM stage; rerun 'covariates' with a "
            "larger glm_alpha or a different covariates list"
        )
    treated = cfg.treated_unit
    if treated not in table.unit_ids:
        raise ConfigError(f"treated unit {treated!r} has no covariates")
    if cfg.sc_pool == "screened":
        pool = load_screen(cfg).unit_ids
    else:
        pool = [u for u in panel.unit_ids if u != treated]
    donors = [u for u in pool if u in table.unit_ids]
    dropped = [u for u in pool if u not in table.unit_ids]
    if not donors:
        raise ConfigError(f"no covariate-complete donors in the {cfg.sc_pool!r} pool")
    names = list(glm["v"])
    v0 = CovariateWeights(tuple(names), [glm["v"][n] for n in names])
    x1, x0 = covariate_matrix(table, treated, donors, names)
    series = {s.unit_id: s for s in to_rates(panel.subset([treated, *donors]), cfg.rate_scale)}
    sol = solve_outer(series[treated], [series[d] for d in donors], x1, x0, cfg.spec,
                      v_init=v0, mode=cfg.sc_mode, budget=cfg.sc_budget, seed=cfg.seed,
                      include_post=cfg.include_post)
    doc = sol.to_dict()
    doc.update({"treated_unit": treated, "pool": cfg.sc_pool, "donors": donors,
                "dropped_without_covariates": dropped, "rate_scale": cfg.rate_scale})
    _write(cfg.out / "synth.json", _dump(doc))
    _write(cfg.out / "synth_table.txt", sol.tau_fit.table(clustered=False) + "\n")
    labels = period_mask(cfg.spec, panel.dates)
    rows = [[d.isoformat(), lab, _num(t), _num(s)] for d, lab, t, s in
            zip(panel.dates, labels, series[treated].rates, sol.synthetic_series.rates)]
    _write_csv(cfg.out / "synth_plot.csv", ["date", "period", "treated", "synthetic"], rows)
    return {"tau": sol.tau_fit.tau, "p_value": sol.tau_fit.p_value_classical,
            "pre_mspe": sol.pre_mspe, "written": ["synth.json", "synth_table.txt", "synth_plot.csv"]}


def cmd_report(cfg: RunConfig) -> dict:
    """One summary of whatever stage outputs exist."""
    out = cfg.out
    doc: dict = {"config": cfg.to_dict()}
    lines = [f"treated unit: {cfg.treated_unit}"]
    if (out / "screen.json").exists():
        s = load_screen(cfg)
        doc["screen"] = {"treated_slope": s.treated_slope, "candidates": s.unit_ids}
        lines.append(f"treated last-segment slope: {s.treated_slope:.6g}")
        lines.append(f"screened candidates ({len(s.unit_ids)}): {', '.join(s.unit_ids) or '-'}")
    if (out / "did.json").exists():
        d = _read_json(out / "did.json", "did")
        doc["did"] = {k: {"tau": v["fit"]["tau"], "se": v["fit"]["se_tau_clustered"],
                          "p_value": v["fit"]["p_value"], "n_donors": len(v["donors"])}
                      for k, v in d["pools"].items()}
        lines.append("DID (clustered):")
        for k, v in doc["did"].items():
            lines.append(f"  {k:<32} tau={v['tau']:.4e} se={v['se']:.3e} p={v['p_value']:.3g}")
    if (out / "nbglm.json").exists():
        g = _read_json(out / "nbglm.json", "covariates")
        doc["covariates"] = {"selected": g["selected"], "v": g["v"]}
        lines.append(f"significant covariates: {', '.join(g['selected']) or '-'}")
    if (out / "synth.json").exists():
        s = _read_json(out / "synth.json", "synth")
        tf = s["tau_fit"]
        doc["synth"] = {"tau": tf["tau"], "p_value": tf["p_value_classical"],
                        "pre_mspe": s["pre_mspe"], "weights": s["weights"]}
        lines.append(f"synthetic control: tau={tf['tau']:.4e} p={tf['p_value_classical']:.3g} "
                     f"pre-MSPE={s['pre_mspe']:.3e}")
    _write(out / "report.json", _dump(doc))
    _write(out / "report.txt", "\n".join(lines) + "\n")
    return {"sections": sorted(k for k in doc if k != "config"), "written": ["report.json", "report.txt"]}


def selftest_reports(seed: int = 0) -> list[oracle.OracleReport]:
    """Compare each estimator with its brute-force reference on small random problems."""
    rng = np.random.default_rng(seed)
    reports = []
    for i in range(5):
        n = 30
        X = np.column_stack([np.ones(n), rng.integers(0, 2, (n, 2)).astype(float)])
        X = np.column_stack([X, X[:, 1] * X[:, 2]])
        X[:4, 1:] = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 1]]
        y = rng.normal(size=n)
        coef, resid, vcov = ols(X, y)
        reports.append(oracle.OracleReport.compare(f"ols-{i}", coef, oracle.ols_normal_equations(X, y), 1e-10))
        reports.append(oracle.OracleReport.compare(f"vcov-{i}", vcov, oracle.classical_vcov(X, y), 1e-10))
        clusters = list(rng.integers(0, 6, n))
        from .did import sandwich

        reports.append(oracle.OracleReport.compare(
            f"sandwich-{i}", sandwich(X, resid, clusters), oracle.cluster_sandwich(X, y, clusters), 1e-10))
    for i in range(5):
        y = np.cumsum(rng.normal(size=14)) + 0.3 * np.arange(14)
        pen = float(rng.uniform(0.5, 3.0))
        r = detect_knots(y, 2, criterion=pen)
        _, best = oracle.enumerate_knots(y, 2, pen)
        reports.append(oracle.OracleReport.compare(f"knots-{i}", r.objective, best, 1e-8 * (1 + abs(best))))
    for i in range(5):
        K, N = 3, 3
        x0 = rng.normal(size=(K, N))
        x1 = rng.normal(size=K)
        v = rng.uniform(0.1, 1.0, K)
        w = solve_inner(x1, x0, v)
        _, gbest = oracle.simplex_grid_min(lambda ww: inner_objective(ww, x1, x0, v), N, 0.01)
        reports.append(oracle.OracleReport.compare(
            f"simplex-{i}", max(w.objective - gbest, 0.0), 0.0, 1e-6))
    for i in range(3):
        n = 200
        Z = rng.normal(size=(n, 2))
        yp = rng.poisson(np.exp(1.0 + Z @ [0.3, -0.2]))
        f = fit_nb(yp, Z, dispersion=1e8)
        ref = oracle.poisson_irls(yp, np.column_stack([np.ones(n), Z]))
        reports.append(oracle.OracleReport.compare(f"poisson-{i}", f.params, ref, 1e-4))
    return reports


def cmd_selftest(cfg: RunConfig) -> dict:
    """Run the oracle comparisons and write them as JSON lines."""
    reports = selftest_reports(cfg.seed)
    _write(cfg.out / "selftest.jsonl", "".join(r.to_json() + "\n" for r in reports))
    failed = [r.case_id for r in reports if not r.passed]
    if failed:
        raise ArithmeticError(f"oracle disagreement in {failed}")
    return {"cases": len(reports), "failed": failed, "written": ["selftest.jsonl"]}


_STAGES = {
    "ingest": cmd_ingest,
    "knots": cmd_knots,
    "select": cmd_select,
    "did": cmd_did,
    "covariates": cmd_covariates,
    "synth": cmd_synth,
    "report": cmd_report,
    "selftest": cmd_selftest,
}


def _run_stage(name: str, fn, cfg: RunConfig) -> dict:
    try:
        return fn(cfg)
    except StageError:
        raise
    except (DegenerateDesignError, SeparationError, ArithmeticError, np.linalg.LinAlgError) as exc:
        raise StageError(name, exc, EXIT_NUMERIC) from exc
    except (IngestError, ConfigError, FileNotFoundError, KeyError, ValueError) as exc:
        raise StageError(name, exc, EXIT_INPUT) from exc


def run(command: str, cfg: RunConfig) -> dict:
    """Run one command; raises :class:`StageError` on failure."""
    if command not in _STAGES:
        raise ConfigError(f"unknown command {command!r}")
    return _run_stage(command, _STAGES[command], cfg)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="policyeval", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="TOML file of key = value settings")
    p.add_argument("-v", "--verbose", action="store_true")
    for name, f in _FIELDS.items():
        p.add_argument(f"--{name}", dest=name, default=None, metavar=name.upper(),
                       help=f"override {name} (default: {f.default!r})")
    return p


def _plain(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: getattr(args, k) for k in _FIELDS}
    try:
        cfg = load_config(args.config, overrides)
        summary = run(args.command, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    print(json.dumps(_plain(summary), sort_keys=True))
    return EXIT_OK
