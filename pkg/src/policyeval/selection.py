"""Screening of control units by pre-treatment trend similarity.

Each unit's pre-treatment series (first reported case up to the day before
the effective start) is segmented with :func:`~policyeval.changepoint.detect_knots`;
a line is fitted over the part after the last knot.  Units whose slope is
significant and whose fit is good enough become candidates, ranked by the
absolute difference between their slope and the treated unit's.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .changepoint import KnotReport, detect_knots, last_segment_trend
from .panel import PanelDataset, TreatmentSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Thresholds:
    alpha: float = 0.05
    min_adj_r2: float = 0.75
    max_abs_dev: float | None = None


@dataclass(frozen=True)
class Candidate:
    unit_id: str
    slope: float
    p_value: float
    adj_r_squared: float
    abs_deviation: float


@dataclass(frozen=True)
class DonorScreen:
    candidates: tuple
    thresholds: Thresholds
    treated_unit: str
    treated_slope: float
    excluded: tuple = field(default=())  # (unit_id, reason)
    warnings: tuple = field(default=())

    @property
    def unit_ids(self) -> list[str]:
        return [c.unit_id for c in self.candidates]

    def within(self, max_abs_dev: float) -> list[str]:
        """Candidates whose absolute slope deviation is strictly below ``max_abs_dev``."""
        return [c.unit_id for c in self.candidates if c.abs_deviation < max_abs_dev]

    def to_dict(self) -> dict:
        return {
            "treated_unit": self.treated_unit,
            "treated_slope": self.treated_slope,
            "thresholds": asdict(self.thresholds),
            "candidates": [asdict(c) for c in self.candidates],
            "excluded": [{"unit_id": u, "reason": r} for u, r in self.excluded],
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DonorScreen":
        return cls(
            candidates=tuple(Candidate(**c) for c in d["candidates"]),
            thresholds=Thresholds(**d["thresholds"]),
            treated_unit=d["treated_unit"],
            treated_slope=d["treated_slope"],
            excluded=tuple((e["unit_id"], e["reason"]) for e in d["excluded"]),
            warnings=tuple(d["warnings"]),
        )

    def write_csv(self, path) -> None:
        """Ranked candidate table: rank, unit, slope, deviation, p-value, adjusted R^2."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "unit_id", "slope", "abs_deviation", "p_value", "adj_r_squared"])
            for i, c in enumerate(self.candidates, start=1):
                w.writerow([i, c.unit_id, repr(c.slope), repr(c.abs_deviation),
                            repr(c.p_value), repr(c.adj_r_squared)])


def pre_treatment_series(panel: PanelDataset, spec: TreatmentSpec, unit: str,
                         rate_scale: float | None = None):
    """Dates and values of one unit from its first case to the day before treatment.

    Values are cumulative counts, or rates times ``rate_scale`` when given.
    """
    i = panel.index(unit)
    y = panel.cumulative_cases[i].astype(float)
    if rate_scale is not None:
        y = rate_scale * y / panel.population[i]
    before = np.array([d < spec.effective_start for d in panel.dates])
    nz = np.flatnonzero(panel.cumulative_cases[i] > 0)
    first = int(nz[0]) if len(nz) else panel.n_dates
    keep = before & (np.arange(panel.n_dates) >= first)
    return [d for d, k in zip(panel.dates, keep) if k], y[keep]


def detect_all_knots(panel: PanelDataset, spec: TreatmentSpec, max_knots: int = 4,
                     criterion="bic", rate_scale: float | None = None,
                     units: Sequence[str] | None = None, min_gap: int = 3) -> dict:
    """Knot reports for every unit's pre-treatment series.

    ``min_gap`` defaults to 3 so the final segment always has enough points
    for a slope test.  Units whose series is too short get ``None``;
    ``max_knots`` is lowered for short series rather than raising.
    """
    out = {}
    for u in units if units is not None else panel.unit_ids:
        dates, y = pre_treatment_series(panel, spec, u, rate_scale)
        fit_knots = min(max_knots, (len(y) - 1) // min_gap - 1)
        if len(y) < 4 or fit_knots < 0:
            out[u] = None
            continue
        out[u] = detect_knots(y, fit_knots, criterion, dates=dates, unit_id=u, min_gap=min_gap)
    return out


def _trend(panel, spec, unit, report, rate_scale):
    if report is None:
        raise ValueError("pre-treatment series too short for knot detection")
    dates, y = pre_treatment_series(panel, spec, unit, rate_scale)
    return last_segment_trend(y, report, dates=dates)


def screen_donors(panel: PanelDataset, spec: TreatmentSpec, knot_reports: Mapping[str, KnotReport | None],
                  thresholds: Thresholds = Thresholds(), rate_scale: float | None = None,
                  units: Sequence[str] | None = None) -> DonorScreen:
    """Rank candidate controls by closeness of their recent pre-treatment slope.

    Parameters
    ----------
    panel, spec
        Data and treatment definition.
    knot_reports : mapping
        Unit id to :class:`KnotReport` from :func:`detect_all_knots` run with
        the same ``rate_scale``.
    thresholds : Thresholds
        Candidates need ``p < alpha`` and adjusted R^2 ``>= min_adj_r2``; with
        ``max_abs_dev`` set, also a deviation strictly below it.
    rate_scale : float, optional
        Work on rates times this factor instead of cumulative counts.
    units : sequence of str, optional
        Restrict the candidate pool (default: every other unit in the panel).

    Raises
    ------
    ValueError
        If the treated unit's own trend cannot be fitted.
    """
    treated = spec.treated_unit
    spec.check_panel(panel)
    try:
        t_fit = _trend(panel, spec, treated, knot_reports.get(treated), rate_scale)
    except ValueError as exc:
        raise ValueError(f"trend fit failed for treated unit {treated!r}: {exc}") from exc

    cands, excluded = [], []
    pool = units if units is not None else panel.unit_ids
    for u in pool:
        if u == treated:
            continue
        try:
            f = _trend(panel, spec, u, knot_reports.get(u), rate_scale)
        except (ValueError, KeyError) as exc:
            excluded.append((u, str(exc)))
            continue
        dev = abs(f.slope - t_fit.slope)
        if not f.p_value < thresholds.alpha:
            excluded.append((u, f"slope p-value {f.p_value:.3g} >= {thresholds.alpha}"))
        elif not f.adj_r_squared >= thresholds.min_adj_r2:
            excluded.append((u, f"adjusted R^2 {f.adj_r_squared:.3g} < {thresholds.min_adj_r2}"))
        elif thresholds.max_abs_dev is not None and not dev < thresholds.max_abs_dev:
            excluded.append((u, f"slope deviation {dev:.3g} >= {thresholds.max_abs_dev}"))
        else:
            cands.append(Candidate(u, f.slope, f.p_value, f.adj_r_squared, dev))

    cands.sort(key=lambda c: (c.abs_deviation, c.unit_id))
    warnings = ()
    if not cands:
        warnings = ("no unit passed the donor screen",)
        log.warning(warnings[0])
    return DonorScreen(tuple(cands), thresholds, treated, t_fit.slope, tuple(excluded), warnings)
