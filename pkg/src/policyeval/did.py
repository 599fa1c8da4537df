"""Two-group, two-period difference-in-differences.

The regression is

    rate = alpha + beta * dt + gamma * dc + tau * dc * dt + error

with ``dc`` marking the treated unit and ``dt`` the treatment window
(effective start through effective end plus the post-treatment lag).  Standard
errors are clustered by unit with the CR1 small-sample factor and inference
uses a t distribution with G - 1 degrees of freedom.
"""

from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .panel import (
    POST,
    PRE,
    TREATMENT,
    PanelDataset,
    RateSeries,
    TreatmentSpec,
    period_mask,
    to_rates,
)

COEF_NAMES = ("(Intercept)", "dt", "dc", "dc:dt")


class DegenerateDesignError(ValueError):
    """Regressor matrix is rank deficient."""


@dataclass(frozen=True)
class DidDesign:
    """Long-format observations for the DID regression, one row per unit-date."""

    unit_ids: np.ndarray
    dates: np.ndarray
    y: np.ndarray
    dc: np.ndarray
    dt: np.ndarray
    clusters: np.ndarray
    treated_unit: str = ""

    def __post_init__(self):
        n = len(self.y)
        for name in ("unit_ids", "dates", "dc", "dt", "clusters"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} entries, expected {n}")
        for name in ("unit_ids", "dates", "clusters"):
            a = np.array(getattr(self, name), dtype=object)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        for name in ("y", "dc", "dt"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def n_obs(self) -> int:
        return len(self.y)

    def exog(self) -> np.ndarray:
        return np.column_stack([np.ones(self.n_obs), self.dt, self.dc, self.dc * self.dt])

    def scaled(self, c: float) -> "DidDesign":
        return DidDesign(self.unit_ids, self.dates, c * self.y, self.dc, self.dt,
                         self.clusters, self.treated_unit)


@dataclass(frozen=True)
class ClusterInference:
    vcov: np.ndarray
    se: np.ndarray
    se_tau: float
    t_stat: float
    p_value: float
    n_clusters: int
    df: int


@dataclass(frozen=True)
class DidFit:
    names: tuple
    coef: np.ndarray
    residuals: np.ndarray
    vcov_classical: np.ndarray
    vcov_clustered: np.ndarray
    n_obs: int
    n_clusters: int
    se_tau_clustered: float
    t_stat: float
    p_value: float
    t_stat_classical: float
    p_value_classical: float
    notes: tuple = field(default=())

    alpha = property(lambda self: float(self.coef[0]))
    beta = property(lambda self: float(self.coef[1]))
    gamma = property(lambda self: float(self.coef[2]))
    tau = property(lambda self: float(self.coef[3]))

    @property
    def se_classical(self) -> np.ndarray:
        return np.sqrt(np.diag(self.vcov_classical))

    @property
    def se_clustered(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov_clustered), 0.0, None))

    @property
    def df_resid(self) -> int:
        return self.n_obs - len(self.coef)

    def table(self, clustered: bool = True) -> str:
        """Coefficient table: estimate, SE, t and p for every regressor."""
        if clustered and self.n_clusters >= 2:
            se = self.se_clustered
            df = self.n_clusters - 1
            label = f"clustered SE (G={self.n_clusters}, CR1, t({df}))"
        else:
            se = self.se_classical
            df = self.df_resid
            label = f"classical SE (t({df}))"
        lines = [f"{'':<12}{'Estimate':>14}{'Std. Error':>14}{'t value':>10}{'Pr(>|t|)':>12}"]
        for name, b, s in zip(self.names, self.coef, se):
            t = b / s if s > 0 else math.nan
            p = 2 * stats.t.sf(abs(t), df) if s > 0 else math.nan
            lines.append(f"{name:<12}{b:>14.6e}{s:>14.6e}{t:>10.3f}{p:>12.4g}")
        lines.append(f"n = {self.n_obs}; {label}")
        lines.extend(self.notes)
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "coef": self.coef.tolist(),
            "se_classical": self.se_classical.tolist(),
            "se_clustered": self.se_clustered.tolist(),
            "vcov_classical": self.vcov_classical.tolist(),
            "vcov_clustered": self.vcov_clustered.tolist(),
            "tau": self.tau,
            "se_tau_clustered": self.se_tau_clustered,
            "t_stat": self.t_stat,
            "p_value": self.p_value,
            "t_stat_classical": self.t_stat_classical,
            "p_value_classical": self.p_value_classical,
            "n_obs": self.n_obs,
            "n_clusters": self.n_clusters,
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def design_from_series(series: Sequence[RateSeries], treated_unit: str, spec: TreatmentSpec,
                       include_post: bool = False, start=None) -> DidDesign:
    """Stack rate series into a DID design.  Each series is its own cluster."""
    periods = {PRE, TREATMENT} | ({POST} if include_post else set())
    units, dates, y, dc, dtv = [], [], [], [], []
    for s in series:
        labels = period_mask(spec, s.dates)
        for d, r, lab in zip(s.dates, s.rates, labels):
            if lab not in periods or (start is not None and d < start):
                continue
            units.append(s.unit_id)
            dates.append(d)
            y.append(r)
            dc.append(1.0 if s.unit_id == treated_unit else 0.0)
            dtv.append(1.0 if lab == TREATMENT else 0.0)
    return DidDesign(units, dates, y, dc, dtv, list(units), treated_unit)


def build_design(panel: PanelDataset, spec: TreatmentSpec, donors: Sequence[str],
                 include_post: bool = False, scale: float = 1.0, start=None) -> DidDesign:
    """Long-format design for the treated unit and a donor pool.

    Parameters
    ----------
    panel, spec
        Data and treatment definition.
    donors : sequence of str
        Control units; must be nonempty and exclude the treated unit.
    include_post : bool
        Keep dates after the treatment window (``dt = 0`` there).
    scale : float
        Rate scale passed to :func:`~policyeval.panel.to_rates`.
    start : date, optional
        Drop observations before this date.
    """
    donors = list(donors)
    if not donors:
        raise ValueError("donor list is empty")
    if spec.treated_unit in donors:
        raise ValueError("treated unit cannot be a donor")
    if len(set(donors)) != len(donors):
        raise ValueError("duplicate donors")
    spec.check_panel(panel)
    sub = panel.subset([spec.treated_unit, *donors])
    return design_from_series(to_rates(sub, scale), spec.treated_unit, spec, include_post, start)


def _check_rank(X: np.ndarray, names: Sequence[str]) -> None:
    rank = 0
    for j in range(X.shape[1]):
        r = np.linalg.matrix_rank(X[:, :j + 1])
        if r == rank:
            raise DegenerateDesignError(f"regressor {names[j]!r} is collinear with earlier columns")
        rank = r


def ols(X: np.ndarray, y: np.ndarray, names: Sequence[str] | None = None):
    """Least-squares coefficients, residuals and classical covariance."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(k)]
    if n <= k:
        raise DegenerateDesignError(f"{n} observations for {k} regressors")
    _check_rank(X, names)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    s2 = float(resid @ resid) / (n - k)
    xtx_inv = np.linalg.inv(X.T @ X)
    vcov = s2 * xtx_inv
    return coef, resid, (vcov + vcov.T) / 2


def sandwich(X: np.ndarray, resid: np.ndarray, clusters: Sequence) -> np.ndarray:
    """CR1 cluster-robust covariance of OLS coefficients."""
    X = np.asarray(X, dtype=float)
    n, k = X.shape
    codes, index = np.unique(np.asarray(clusters, dtype=str), return_inverse=True)
    G = len(codes)
    if G < 2:
        raise ValueError("cluster-robust covariance needs at least 2 clusters")
    scores = np.zeros((G, k))
    np.add.at(scores, index, X * np.asarray(resid)[:, None])
    bread = np.linalg.inv(X.T @ X)
    V = bread @ (scores.T @ scores) @ bread
    V *= G / (G - 1) * (n - 1) / (n - k)
    return (V + V.T) / 2


def cluster_robust_vcov(design: DidDesign, fit: DidFit) -> ClusterInference:
    """Clustered covariance and the corrected t-test for tau.

    Inference uses t(G - 1).
    """
    X = design.exog()
    V = sandwich(X, fit.residuals, design.clusters)
    G = len(set(design.clusters))
    se = np.sqrt(np.clip(np.diag(V), 0.0, None))
    se_tau = float(se[3])
    t = fit.tau / se_tau if se_tau > 0 else math.copysign(math.inf, fit.tau) if fit.tau else 0.0
    p = float(2 * stats.t.sf(abs(t), G - 1)) if math.isfinite(t) else 0.0
    return ClusterInference(V, se, se_tau, float(t), p, G, G - 1)


def fit_ols(design: DidDesign) -> DidFit:
    """Fit the DID regression by OLS.

    Returns classical and (when the design has at least two clusters)
    clustered covariance; ``t_stat``/``p_value`` are the clustered ones and
    fall back to classical inference for a single cluster.

    Raises
    ------
    DegenerateDesignError
        If a regressor is constant or collinear, e.g. all ``dt`` equal.
    """
    X = design.exog()
    for j, name in ((1, "dt"), (2, "dc"), (3, "dc:dt")):
        col = X[:, j]
        if np.all(col == col[0]):
            raise DegenerateDesignError(f"regressor {name!r} is constant")
    coef, resid, vcov = ols(X, design.y, COEF_NAMES)
    k = len(coef)
    df = design.n_obs - k
    se_tau = math.sqrt(vcov[3, 3])
    t_cl = coef[3] / se_tau if se_tau > 0 else 0.0
    p_cl = float(2 * stats.t.sf(abs(t_cl), df)) if se_tau > 0 else 1.0

    notes = []
    G = len(set(design.clusters))
    base = DidFit(COEF_NAMES, coef, resid, vcov, np.full((k, k), np.nan), design.n_obs, G,
                  math.nan, t_cl, p_cl, t_cl, p_cl)
    if G < 2:
        notes.append("single cluster: clustered covariance unavailable")
        return DidFit(**{**base.__dict__, "notes": tuple(notes)})
    ci = cluster_robust_vcov(design, base)
    if G == 2:
        notes.append("only 2 clusters: clustered inference is degenerate (t with 1 df)")
    return DidFit(
        names=COEF_NAMES,
        coef=coef,
        residuals=resid,
        vcov_classical=vcov,
        vcov_clustered=ci.vcov,
        n_obs=design.n_obs,
        n_clusters=G,
        se_tau_clustered=ci.se_tau,
        t_stat=ci.t_stat,
        p_value=ci.p_value,
        t_stat_classical=t_cl,
        p_value_classical=p_cl,
        notes=tuple(notes),
    )


def double_difference(panel: PanelDataset, spec: TreatmentSpec, donors: Sequence[str],
                      scale: float = 1.0, start=None) -> float:
    """Difference of treatment-minus-pre mean rates, treated unit minus donor pool.

    Donor cell means pool every donor-date observation in the period.
    """
    donors = list(donors)
    if not donors:
        raise ValueError("donor list is empty")
    labels = period_mask(spec, panel.dates)
    if start is not None:
        start = start if isinstance(start, dt.date) else dt.date.fromisoformat(str(start))
        keep = np.array([d >= start for d in panel.dates])
    else:
        keep = np.ones(panel.n_dates, dtype=bool)
    pre = (labels == PRE) & keep
    trt = (labels == TREATMENT) & keep
    if not pre.any() or not trt.any():
        raise ValueError("pre-treatment or treatment period is empty")
    rates = scale * panel.cumulative_cases / panel.population[:, None]
    t = rates[panel.index(spec.treated_unit)]
    c = rates[[panel.index(u) for u in donors]]
    return float((t[trt].mean() - t[pre].mean()) - (c[:, trt].mean() - c[:, pre].mean()))
