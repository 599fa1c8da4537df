"""Readers for NYT-format case files and county covariate files."""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .panel import PanelDataset

log = logging.getLogger(__name__)

CASE_COLUMNS = ("date", "county", "state", "fips", "cases", "deaths")

# covariates considered for the count model, in the order they are listed
DEFAULT_COVARIATES = (
    "males",
    "poverty_rate",
    "juveniles",
    "seniors",
    "population_density",
    "diabetes",
    "svi",
    "fte_practitioners_needed",
    "medicare_eligible",
    "dem_rep_ratio",
    "hospitals",
    "respiratory_mortality",
    "heart_disease_mortality",
)


class IngestError(ValueError):
    """Malformed or inconsistent input file."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}" + (f":{line}" if line is not None else "") + ": "
        super().__init__(where + message)


@dataclass(frozen=True)
class CompletenessIssue:
    unit: str
    issue: str
    action: str

    def to_json(self) -> str:
        return json.dumps({"unit": self.unit, "issue": self.issue, "action": self.action})


def write_completeness_report(issues: Iterable[CompletenessIssue], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in issues:
            fh.write(item.to_json() + "\n")


def read_completeness_report(path) -> list[CompletenessIssue]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(CompletenessIssue(**json.loads(line)))
    return out


def _repair_monotone(values: np.ndarray, policy: str, unit: str) -> np.ndarray:
    if policy == "clamp":
        return np.maximum.accumulate(values)
    if policy == "fail":
        if np.any(np.diff(values) < 0):
            raise IngestError(f"cumulative cases decrease for unit {unit!r}")
        return values
    raise ValueError(f"unknown repair policy {policy!r}")


def read_case_csv(
    path,
    state_filter: str,
    population: Mapping[str, int],
    repair: str = "clamp",
    issues: list | None = None,
) -> PanelDataset:
    """Read an NYT-format case file into a balanced panel for one state.

    Parameters
    ----------
    path : path-like
        CSV with header ``date,county,state,fips,cases,deaths``.
    state_filter : str
        State name to keep.
    population : mapping
        Population per county name (or per FIPS code).  Counties without a
        positive population are dropped and reported.
    repair : {"clamp", "fail"}
        How to treat decreases in cumulative counts.  ``"clamp"`` replaces
        each value by the running maximum.
    issues : list, optional
        Receives :class:`CompletenessIssue` records for dropped rows/units.

    Returns
    -------
    PanelDataset
        Units sorted by name; dates are the union of reported dates, and
        each unit is zero-filled before its first report and carried forward
        across any later gaps.
    """
    path = Path(path)
    issues = issues if issues is not None else []
    records: dict[tuple[str, dt.date], int] = {}
    fips_of: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError("empty file", path) from None
        header = [h.strip().lower() for h in header]
        if tuple(header) != CASE_COLUMNS:
            raise IngestError(f"header {header} does not match {list(CASE_COLUMNS)}", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(CASE_COLUMNS):
                raise IngestError(f"expected {len(CASE_COLUMNS)} fields, got {len(row)}", path, lineno)
            date_s, county, state, fips, cases_s = (c.strip() for c in row[:5])
            if state != state_filter:
                continue
            try:
                date = dt.date.fromisoformat(date_s)
            except ValueError:
                raise IngestError(f"bad date {date_s!r}", path, lineno) from None
            try:
                cases = int(float(cases_s))
            except ValueError:
                raise IngestError(f"bad case count {cases_s!r}", path, lineno) from None
            if cases < 0:
                raise IngestError(f"negative case count {cases}", path, lineno)
            if not fips:
                # NYT "Unknown" rows carry no county assignment
                issues.append(CompletenessIssue(county, f"row without FIPS on {date}", "row_skipped"))
                continue
            key = (county, date)
            if key in records:
                raise IngestError(f"duplicate row for ({date}, {county})", path, lineno)
            records[key] = cases
            fips_of.setdefault(county, fips)

    if not records:
        raise IngestError(f"no rows for state {state_filter!r}", path)

    dates = sorted({d for _, d in records})
    counties = sorted({c for c, _ in records})
    keep, pops = [], []
    for c in counties:
        p = population.get(c, population.get(fips_of[c]))
        if p is None or not p > 0:
            issues.append(CompletenessIssue(c, "missing population", "dropped"))
            continue
        keep.append(c)
        pops.append(int(p))
    if not keep:
        raise IngestError("no county has a population entry", path)

    pos = {d: j for j, d in enumerate(dates)}
    grid = np.zeros((len(keep), len(dates)), dtype=np.int64)
    for i, c in enumerate(keep):
        seen = np.zeros(len(dates), dtype=bool)
        for d in dates:
            v = records.get((c, d))
            if v is not None:
                grid[i, pos[d]] = v
                seen[pos[d]] = True
        # carry forward across interior gaps
        first = int(np.argmax(seen))
        gaps = 0
        for j in range(first + 1, len(dates)):
            if not seen[j]:
                grid[i, j] = grid[i, j - 1]
                gaps += 1
        if gaps:
            issues.append(CompletenessIssue(c, f"{gaps} missing date(s) after first report", "carried_forward"))
        repaired = _repair_monotone(grid[i], repair, c)
        if not np.array_equal(repaired, grid[i]):
            issues.append(CompletenessIssue(c, "cumulative count decreased", "clamped"))
        grid[i] = repaired

    return PanelDataset(keep, dates, grid, pops, [fips_of[c] for c in keep])


def write_case_csv(panel: PanelDataset, path, state: str) -> None:
    """Write a panel back out in NYT format, one row per unit and date.

    Zero-filled leading days are written explicitly so the file re-reads to
    the identical panel.  Deaths are written as 0.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CASE_COLUMNS)
        for j, d in enumerate(panel.dates):
            for i, unit in enumerate(panel.unit_ids):
                c = int(panel.cumulative_cases[i, j])
                w.writerow([d.isoformat(), unit, state, panel.fips[i], c, 0])


def write_population_csv(panel: PanelDataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["county", "fips", "population"])
        for u, f, p in zip(panel.unit_ids, panel.fips, panel.population):
            w.writerow([u, f, int(p)])


def read_population_csv(path, column: str = "population") -> dict[str, int]:
    """Map county name and FIPS code to population from any CSV with those columns."""
    out: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or column not in reader.fieldnames:
            raise IngestError(f"no {column!r} column", path, 1)
        for lineno, row in enumerate(reader, start=2):
            raw = (row.get(column) or "").strip()
            if not raw:
                continue
            try:
                p = int(float(raw))
            except ValueError:
                raise IngestError(f"bad population {raw!r}", path, lineno) from None
            for key in ("county", "fips"):
                if row.get(key):
                    out[row[key].strip()] = p
    return out


def zscore_rows(values: np.ndarray) -> np.ndarray:
    """Z-score each row across columns (sample sd); constant rows map to zero."""
    values = np.asarray(values, dtype=float)
    mean = values.mean(axis=1, keepdims=True)
    centered = values - mean
    if values.shape[1] < 2:
        return np.zeros_like(values)
    sd = centered.std(axis=1, ddof=1, keepdims=True)
    scale = np.max(np.abs(values), axis=1, keepdims=True)
    const = sd <= 1e-14 * np.maximum(scale, 1.0)
    return np.where(const, 0.0, centered / np.where(const, 1.0, sd))


@dataclass(frozen=True)
class CovariateTable:
    """Raw and z-scored covariates, one column per unit.

    ``values`` and ``normalized`` have shape ``(len(covariate_names), len(unit_ids))``.
    """

    unit_ids: tuple
    covariate_names: tuple
    values: np.ndarray
    normalized: np.ndarray = field(default=None)
    issues: tuple = ()

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        names = tuple(self.covariate_names)
        units = tuple(self.unit_ids)
        if values.shape != (len(names), len(units)):
            raise ValueError(f"values has shape {values.shape}, expected {(len(names), len(units))}")
        if not np.all(np.isfinite(values)):
            raise ValueError("covariate values must be finite")
        norm = zscore_rows(values) if self.normalized is None else np.array(self.normalized, dtype=float)
        values.setflags(write=False)
        norm.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "normalized", norm)
        object.__setattr__(self, "unit_ids", units)
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "issues", tuple(self.issues))

    def column(self, unit: str, normalized: bool = True) -> np.ndarray:
        i = self.unit_ids.index(unit)
        return (self.normalized if normalized else self.values)[:, i]

    def select(self, names: Sequence[str] | None = None, units: Sequence[str] | None = None,
               renormalize: bool = False) -> "CovariateTable":
        """Sub-table.  Normalized values are kept as computed on the full table
        unless ``renormalize`` is set."""
        names = list(self.covariate_names if names is None else names)
        units = list(self.unit_ids if units is None else units)
        ri = [self.covariate_names.index(n) for n in names]
        ci = [self.unit_ids.index(u) for u in units]
        vals = self.values[np.ix_(ri, ci)]
        norm = None if renormalize else self.normalized[np.ix_(ri, ci)]
        return CovariateTable(units, names, vals, norm, self.issues)

    def to_dict(self) -> dict:
        return {
            "unit_ids": list(self.unit_ids),
            "covariate_names": list(self.covariate_names),
            "values": self.values.tolist(),
            "normalized": self.normalized.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CovariateTable":
        return cls(d["unit_ids"], d["covariate_names"], d["values"], d["normalized"])


def _parse_float(raw: str) -> float:
    raw = raw.strip().rstrip("%").replace(",", "")
    if raw == "" or raw.upper() in {"NA", "N/A", "NAN", "NULL"}:
        return math.nan
    return float(raw)


def _read_keyed_csv(path, key_candidates=("fips", "county")):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise IngestError("empty file", path)
        fields = [f.strip() for f in reader.fieldnames]
        reader.fieldnames = fields
        rows = list(enumerate(reader, start=2))
    keys = [k for k in key_candidates if k in fields]
    if not keys:
        raise IngestError(f"no key column among {list(key_candidates)}", path, 1)
    return fields, rows


def read_covariate_csv(
    path,
    covariate_spec: Sequence[str] = DEFAULT_COVARIATES,
    override_path=None,
    units: Sequence[str] | None = None,
    override_column: str = "poverty_rate",
    on_missing: str = "drop",
) -> CovariateTable:
    """Read county covariates, apply an optional override file and z-score them.

    Parameters
    ----------
    path : path-like
        CSV with a ``county`` and/or ``fips`` column and one column per covariate.
    covariate_spec : sequence of str
        Covariate columns to keep, in order.
    override_path : path-like, optional
        CSV ``county,<override_column>`` whose values replace those in ``path``
        before normalization.
    units : sequence of str, optional
        Panel units, used for the completeness report and to order columns.
        Units are matched against each row's county name (its FIPS code when
        the row has no name).
    on_missing : {"drop", "fail"}
        What to do with panel units lacking covariates (or with missing values).

    Returns
    -------
    CovariateTable
        ``issues`` lists every unit that was dropped, with the reason.
    """
    covariate_spec = list(covariate_spec)
    fields, rows = _read_keyed_csv(path)
    missing_cols = [c for c in covariate_spec if c not in fields]
    if missing_cols:
        raise IngestError(f"missing covariate columns {missing_cols}", path, 1)

    table: dict[str, dict[str, float]] = {}
    alias: dict[str, str] = {}
    for lineno, row in rows:
        name = (row.get("county") or "").strip()
        fips = (row.get("fips") or "").strip()
        unit = name or fips
        if not unit:
            raise IngestError("row without county or fips", path, lineno)
        if unit in table:
            raise IngestError(f"duplicate row for {unit!r}", path, lineno)
        try:
            table[unit] = {c: _parse_float(row[c] or "") for c in covariate_spec}
        except ValueError as exc:
            raise IngestError(str(exc), path, lineno) from None
        if fips:
            alias[fips] = unit
            alias[fips.lstrip("0")] = unit

    if override_path is not None:
        ofields, orows = _read_keyed_csv(override_path)
        if override_column not in ofields:
            raise IngestError(f"no {override_column!r} column", override_path, 1)
        for lineno, row in orows:
            key = (row.get("county") or row.get("fips") or "").strip()
            unit = key if key in table else alias.get(key, alias.get(key.lstrip("0")))
            if unit is None:
                log.warning("override for unknown unit %r ignored", key)
                continue
            try:
                val = _parse_float(row[override_column] or "")
            except ValueError as exc:
                raise IngestError(str(exc), override_path, lineno) from None
            if override_column not in table[unit]:
                raise IngestError(f"{override_column!r} is not a selected covariate", override_path, lineno)
            table[unit][override_column] = val

    issues: list[CompletenessIssue] = []
    if units is None:
        order = sorted(table)
    else:
        order = []
        for u in units:
            if u in table:
                order.append(u)
            else:
                issues.append(CompletenessIssue(u, "absent from covariate file", "excluded_from_sc"))

    kept, cols = [], []
    for u in order:
        vals = table[u]
        bad = [c for c in covariate_spec if not math.isfinite(vals[c])]
        if bad:
            issues.append(CompletenessIssue(u, f"missing values for {bad}", "excluded_from_sc"))
            continue
        kept.append(u)
        cols.append([vals[c] for c in covariate_spec])

    if issues and on_missing == "fail":
        raise IngestError(f"incomplete covariates for {[i.unit for i in issues]}", path)
    for item in issues:
        log.warning("covariates: %s: %s (%s)", item.unit, item.issue, item.action)
    if not kept:
        raise IngestError("no unit has complete covariates", path)

    values = np.array(cols, dtype=float).T.reshape(len(covariate_spec), len(kept))
    return CovariateTable(kept, covariate_spec, values, issues=issues)
