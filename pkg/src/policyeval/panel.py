"""Panel data types shared by every estimator.

A :class:`PanelDataset` is a balanced units x dates grid of cumulative case
counts together with per-unit population.  Infection rates are derived from
it with :func:`to_rates`, and :func:`period_mask` labels each date as
pre-treatment, treatment or post-treatment for a :class:`TreatmentSpec`.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PRE = "pre"
TREATMENT = "treatment"
POST = "post"


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _as_date(d) -> dt.date:
    if isinstance(d, dt.datetime):
        return d.date()
    if isinstance(d, dt.date):
        return d
    return dt.date.fromisoformat(str(d))


@dataclass(frozen=True)
class PanelDataset:
    """Balanced panel of cumulative counts.

    Parameters
    ----------
    unit_ids : sequence of str
        Unit (county) names.
    dates : sequence of date
        Strictly increasing calendar dates shared by all units.
    cumulative_cases : array_like, shape (n_units, n_dates)
        Nonnegative integers, nondecreasing along the date axis.
    population : array_like, shape (n_units,)
        Positive integers.
    fips : sequence of str, optional
        FIPS codes aligned with ``unit_ids``.
    """

    unit_ids: tuple
    dates: tuple
    cumulative_cases: np.ndarray
    population: np.ndarray
    fips: tuple = field(default=())

    def __post_init__(self):
        units = tuple(str(u) for u in self.unit_ids)
        dates = tuple(_as_date(d) for d in self.dates)
        cases = _frozen(self.cumulative_cases, np.int64)
        pop = _frozen(self.population, np.int64)
        fips = tuple(str(f) for f in self.fips) if self.fips else ("",) * len(units)

        if len(set(units)) != len(units):
            raise ValueError("unit_ids must be unique")
        if cases.shape != (len(units), len(dates)):
            raise ValueError(
                f"cumulative_cases has shape {cases.shape}, expected "
                f"{(len(units), len(dates))}"
            )
        if pop.shape != (len(units),):
            raise ValueError("population must have one entry per unit")
        if len(fips) != len(units):
            raise ValueError("fips must have one entry per unit")
        if any(b <= a for a, b in zip(dates, dates[1:])):
            raise ValueError("dates must be strictly increasing")
        if np.any(pop <= 0):
            bad = [units[i] for i in np.flatnonzero(pop <= 0)]
            raise ValueError(f"population must be positive; offending units: {bad}")
        if np.any(cases < 0):
            raise ValueError("cumulative_cases must be nonnegative")
        if cases.shape[1] > 1 and np.any(np.diff(cases, axis=1) < 0):
            bad = [units[i] for i in np.flatnonzero((np.diff(cases, axis=1) < 0).any(axis=1))]
            raise ValueError(f"cumulative_cases decrease over time for units: {bad}")

        object.__setattr__(self, "unit_ids", units)
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "cumulative_cases", cases)
        object.__setattr__(self, "population", pop)
        object.__setattr__(self, "fips", fips)

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    @property
    def n_dates(self) -> int:
        return len(self.dates)

    def index(self, unit: str) -> int:
        try:
            return self.unit_ids.index(unit)
        except ValueError:
            raise KeyError(f"unit {unit!r} not in panel") from None

    def cases(self, unit: str) -> np.ndarray:
        return self.cumulative_cases[self.index(unit)]

    def subset(self, units: Sequence[str]) -> "PanelDataset":
        idx = [self.index(u) for u in units]
        return PanelDataset(
            unit_ids=[self.unit_ids[i] for i in idx],
            dates=self.dates,
            cumulative_cases=self.cumulative_cases[idx],
            population=self.population[idx],
            fips=[self.fips[i] for i in idx],
        )

    def day_offsets(self) -> np.ndarray:
        """Integer day offsets from the first date."""
        return day_offsets(self.dates)

    def __eq__(self, other):
        if not isinstance(other, PanelDataset):
            return NotImplemented
        return (
            self.unit_ids == other.unit_ids
            and self.dates == other.dates
            and self.fips == other.fips
            and np.array_equal(self.cumulative_cases, other.cumulative_cases)
            and np.array_equal(self.population, other.population)
        )

    __hash__ = None


@dataclass(frozen=True)
class TreatmentSpec:
    """Treated unit and the dates of its intervention.

    The treatment label covers ``effective_start`` through
    ``effective_end + post_lag_days`` inclusive.
    """

    treated_unit: str
    issue_date: dt.date
    effective_start: dt.date
    effective_end: dt.date
    post_lag_days: int = 7

    def __post_init__(self):
        for name in ("issue_date", "effective_start", "effective_end"):
            object.__setattr__(self, name, _as_date(getattr(self, name)))
        object.__setattr__(self, "post_lag_days", int(self.post_lag_days))
        if not self.issue_date <= self.effective_start < self.effective_end:
            raise ValueError("require issue_date <= effective_start < effective_end")
        if self.post_lag_days < 0:
            raise ValueError("post_lag_days must be nonnegative")

    @property
    def treatment_last_day(self) -> dt.date:
        return self.effective_end + dt.timedelta(days=self.post_lag_days)

    def check_panel(self, panel: PanelDataset) -> None:
        if self.treated_unit not in panel.unit_ids:
            raise KeyError(f"treated unit {self.treated_unit!r} not in panel")


@dataclass(frozen=True)
class RateSeries:
    """Per-capita infection rates of one unit (or an aggregate of units)."""

    unit_id: str
    dates: tuple
    rates: np.ndarray

    def __post_init__(self):
        dates = tuple(_as_date(d) for d in self.dates)
        rates = _frozen(self.rates, np.float64)
        if rates.shape != (len(dates),):
            raise ValueError("rates must have one entry per date")
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "rates", rates)

    def __len__(self):
        return len(self.dates)

    def n_before(self, date) -> int:
        """Number of dates strictly before ``date`` (T0 when given the treatment start)."""
        date = _as_date(date)
        return sum(d < date for d in self.dates)

    def window(self, start=None, end=None) -> "RateSeries":
        """Restrict to ``start <= date <= end`` (either bound optional)."""
        start = _as_date(start) if start is not None else None
        end = _as_date(end) if end is not None else None
        keep = [
            i for i, d in enumerate(self.dates)
            if (start is None or d >= start) and (end is None or d <= end)
        ]
        return RateSeries(self.unit_id, [self.dates[i] for i in keep], self.rates[keep])


def day_offsets(dates: Sequence[dt.date]) -> np.ndarray:
    dates = [_as_date(d) for d in dates]
    if not dates:
        return np.zeros(0)
    return np.array([(d - dates[0]).days for d in dates], dtype=float)


def to_rates(panel: PanelDataset, scale: float = 1.0) -> list[RateSeries]:
    """Convert cumulative counts to infection rates.

    ``rate = scale * cumulative_cases / population``; the default scale of 1
    gives per-capita fractions.
    """
    if not scale > 0:
        raise ValueError("scale must be positive")
    rates = scale * panel.cumulative_cases / panel.population[:, None]
    return [RateSeries(u, panel.dates, r) for u, r in zip(panel.unit_ids, rates)]


def rate_matrix(series: Sequence[RateSeries]) -> np.ndarray:
    """Stack series into an (n_dates, n_units) array, checking the date axes agree."""
    if not series:
        raise ValueError("no series given")
    dates = series[0].dates
    for s in series[1:]:
        if s.dates != dates:
            raise ValueError(f"series {s.unit_id!r} has a different date axis")
    return np.column_stack([s.rates for s in series])


def period_mask(spec: TreatmentSpec, dates: Sequence[dt.date]) -> np.ndarray:
    """Label each date ``"pre"``, ``"treatment"`` or ``"post"``.

    Raises
    ------
    ValueError
        If the dates are unsorted or the treatment window misses the axis.
    """
    dates = [_as_date(d) for d in dates]
    if any(b < a for a, b in zip(dates, dates[1:])):
        raise ValueError("dates must be sorted")
    last = spec.treatment_last_day
    labels = np.array(
        [PRE if d < spec.effective_start else TREATMENT if d <= last else POST for d in dates],
        dtype=object,
    )
    if not np.any(labels == TREATMENT):
        raise ValueError(
            f"treatment window {spec.effective_start}..{last} does not intersect "
            "the date axis"
        )
    return labels


def treatment_dummy(spec: TreatmentSpec, dates: Sequence[dt.date]) -> np.ndarray:
    """The DID time dummy: 1.0 exactly on treatment-labelled dates."""
    return (period_mask(spec, dates) == TREATMENT).astype(float)


def group_mean_series(series: Sequence[RateSeries], unit_id: str = "group mean") -> RateSeries:
    """Pointwise mean of rate series sharing one date axis."""
    if len(series) == 0:
        raise ValueError("cannot average an empty list of series")
    return RateSeries(unit_id, series[0].dates, rate_matrix(series).mean(axis=1))
