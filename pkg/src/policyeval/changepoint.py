"""Slope change-point ("knot") detection for cumulative-count series.

The fitted trend is a continuous piecewise-linear function whose knots sit on
observation dates.  Knots are chosen to minimise

    SSE(knots) + penalty * len(knots)

over all placements with at most ``max_knots`` knots.  The minimisation is
exact: a dynamic program over breakpoints where the cost-to-go is a quadratic
in the fitted value at the last breakpoint (continuity couples neighbouring
segments, so the value has to be carried in the state).  Sets of quadratics
are pruned to their lower envelope, which keeps the recursion small without
giving up optimality.
"""

from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .panel import RateSeries, day_offsets

# relative slack used when comparing penalised objectives across knot counts;
# on ties the smaller knot set wins
TIE_RTOL = 1e-10


@dataclass(frozen=True)
class SegmentFit:
    start_index: int
    end_index: int  # exclusive
    slope: float
    intercept: float
    sse: float
    start: object = None
    end: object = None  # last date in the segment


@dataclass(frozen=True)
class KnotReport:
    unit_id: str
    knot_indices: tuple
    knots: tuple
    segment_fits: tuple
    penalty: float
    criterion: str
    sse: float
    objective: float

    def fitted(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the continuous piecewise-linear fit at day offsets ``x``."""
        out = np.empty(len(x))
        for seg in self.segment_fits:
            sl = slice(seg.start_index, seg.end_index)
            out[sl] = seg.intercept + seg.slope * x[sl]
        return out

    def to_dict(self) -> dict:
        def enc(v):
            return v.isoformat() if isinstance(v, dt.date) else v

        d = asdict(self)
        d["knots"] = [enc(k) for k in self.knots]
        d["knot_indices"] = list(self.knot_indices)
        d["segment_fits"] = [
            {k: enc(v) for k, v in asdict(s).items()} for s in self.segment_fits
        ]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "KnotReport":
        def dec(v):
            if isinstance(v, str):
                return dt.date.fromisoformat(v)
            return v

        segs = tuple(
            SegmentFit(**{k: (dec(v) if k in ("start", "end") else v) for k, v in s.items()})
            for s in d["segment_fits"]
        )
        return cls(
            unit_id=d["unit_id"],
            knot_indices=tuple(d["knot_indices"]),
            knots=tuple(dec(k) for k in d["knots"]),
            segment_fits=segs,
            penalty=d["penalty"],
            criterion=d["criterion"],
            sse=d["sse"],
            objective=d["objective"],
        )


@dataclass(frozen=True)
class TrendFit:
    slope: float
    intercept: float
    stderr: float
    p_value: float
    adj_r_squared: float
    n: int


def _unpack(series, dates):
    if isinstance(series, RateSeries):
        return series.unit_id, np.asarray(series.rates, dtype=float), list(series.dates)
    y = np.asarray(series, dtype=float)
    if dates is not None:
        dates = list(dates)
        if len(dates) != len(y):
            raise ValueError("dates and values differ in length")
    return "", y, dates


def _positions(y, dates) -> np.ndarray:
    if dates is None:
        return np.arange(len(y), dtype=float)
    return day_offsets(dates)


def noise_scale(y: np.ndarray) -> float:
    """Robust noise sd from second differences (MAD-based)."""
    d2 = np.diff(np.asarray(y, dtype=float), 2)
    if len(d2) == 0:
        return 0.0
    mad = np.median(np.abs(d2 - np.median(d2)))
    return float(mad / (stats.norm.ppf(0.75) * math.sqrt(6.0)))


def knot_penalty(y: np.ndarray, criterion="bic", sigma: float | None = None) -> float:
    """Per-knot penalty for the given criterion.

    Each knot costs two parameters (location and slope change), so BIC uses
    ``2 * sigma**2 * log(n)`` and AIC ``4 * sigma**2``.  A numeric
    ``criterion`` is used as the penalty directly.
    """
    if isinstance(criterion, (int, float)) and not isinstance(criterion, bool):
        if criterion < 0:
            raise ValueError("penalty must be nonnegative")
        return float(criterion)
    y = np.asarray(y, dtype=float)
    s2 = (noise_scale(y) if sigma is None else float(sigma)) ** 2
    # keeps ties between exact fits broken towards fewer knots
    s2 = max(s2, 1e-10 * (float(np.mean(y ** 2)) + 1.0))
    if criterion == "bic":
        return 2.0 * s2 * math.log(len(y))
    if criterion == "aic":
        return 4.0 * s2
    raise ValueError(f"unknown criterion {criterion!r}")


def _segment_coefficients(x, y):
    """Quadratic-form coefficients of every segment's squared error.

    For breakpoints b < e the fit on (b, e] interpolates the values
    (th_b, th_e); its SSE is
    ``a11 th_b^2 + 2 a12 th_b th_e + a22 th_e^2 + b1 th_b + b2 th_e + c``.
    """
    n = len(y)
    coef = {}
    for b in range(n - 1):
        for e in range(b + 1, n):
            lam = (x[b + 1:e + 1] - x[b]) / (x[e] - x[b])
            yy = y[b + 1:e + 1]
            om = 1.0 - lam
            coef[b, e] = (
                float(om @ om), float(om @ lam), float(lam @ lam),
                -2.0 * float(yy @ om), -2.0 * float(yy @ lam), float(yy @ yy),
            )
    return coef


def _extend(quad, seg):
    """min over th_b of quad(th_b) + seg(th_b, th_e), as a quadratic in th_e."""
    A, B, C = quad
    a11, a12, a22, b1, b2, c = seg
    p = A + a11
    q = B + b1
    return (a22 - a12 * a12 / p, b2 - a12 * q / p, C + c - q * q / (4.0 * p))


def _quad_min(quad) -> float:
    A, B, C = quad
    return C - B * B / (4.0 * A)


def _undominated(Q: np.ndarray) -> np.ndarray:
    """Indices of quadratics not lying above some other single quadratic everywhere.

    A cheap pairwise prefilter; among identical quadratics the first is kept.
    """
    A, B, C = Q[:, 0:1], Q[:, 1:2], Q[:, 2:3]
    da, db, dc = A - A.T, B - B.T, C - C.T  # row i minus column j
    scale = 1e-12 * (np.abs(C) + np.abs(C.T) + 1.0)
    # q_i - q_j >= 0 everywhere: positive-semidefinite difference
    above = (da >= 0) & (db * db - 4.0 * da * dc <= 0) & (dc >= -scale)
    flat = (da == 0) & (db == 0)
    above |= flat & (dc >= -scale)
    n = len(Q)
    same = above & above.T
    order = np.arange(n)
    # strict domination, or an identical quadratic that comes earlier
    dominated = (above & ~same).any(axis=1) | (same & (order[None, :] < order[:, None])).any(axis=1)
    return np.flatnonzero(~dominated)


def _lower_envelope(quads: list) -> list:
    """Indices of quadratics that attain the pointwise minimum somewhere on R."""
    if len(quads) <= 1:
        return list(range(len(quads)))
    Q = np.array(quads, dtype=float)
    idx = _undominated(Q)
    Q = Q[idx]
    if len(Q) == 1:
        return [int(idx[0])]
    A, B, C = Q[:, 0], Q[:, 1], Q[:, 2]
    i, j = np.triu_indices(len(Q), 1)
    da, db, dc = A[i] - A[j], B[i] - B[j], C[i] - C[j]
    flat = np.abs(da) < 1e-14 * np.maximum(np.abs(A[i]), 1.0)
    lin = flat & (db != 0.0)
    disc = db * db - 4.0 * da * dc
    quad = ~flat & (disc >= 0.0)
    s = np.sqrt(disc[quad])
    roots = np.concatenate((
        -dc[lin] / db[lin],
        (-db[quad] - s) / (2 * da[quad]),
        (-db[quad] + s) / (2 * da[quad]),
    ))
    roots = np.unique(roots) if roots.size else np.zeros(1)
    span = max(1.0, float(np.max(np.abs(roots))))
    pts = np.concatenate(([roots[0] - span], (roots[:-1] + roots[1:]) / 2, roots, [roots[-1] + span]))
    vals = A[:, None] * pts ** 2 + B[:, None] * pts + C[:, None]
    best = vals.min(axis=0)
    tol = 1e-9 * (np.abs(best) + 1.0)
    keep = np.any(vals <= best + tol, axis=1)
    return [int(k) for k in idx[keep]]


def _dp_best_knots(x, y, max_knots, penalty, min_gap=1):
    """Exact minimiser of SSE + penalty * n_knots; returns (knots, objective).

    Consecutive breakpoints (series ends included) are at least ``min_gap``
    indices apart.
    """
    n = len(y)
    coef = _segment_coefficients(x, y)
    start = (1.0, -2.0 * y[0], y[0] * y[0])
    # layer[e] -> list of (quadratic in th_e, knots so far); e is a breakpoint
    layer = {e: [(_extend(start, coef[0, e]), ())] for e in range(min_gap, n)}
    best_knots, best_obj = (), min(_quad_min(q) for q, _ in layer[n - 1])
    for m in range(1, max_knots + 1):
        nxt = {}
        for e in range((m + 1) * min_gap, n):
            cands = []
            for b in range(m * min_gap, e - min_gap + 1):
                if b > n - 1 - min_gap:
                    continue
                for quad, knots in layer.get(b, ()):
                    cands.append((_extend(quad, coef[b, e]), knots + (b,)))
            if cands:
                keep = _lower_envelope([c[0] for c in cands])
                nxt[e] = [cands[i] for i in keep]
        layer = nxt
        finals = layer.get(n - 1, [])
        if not finals:
            break
        vals = [_quad_min(q) for q, _ in finals]
        i = int(np.argmin(vals))
        obj = vals[i] + penalty * m
        if obj < best_obj - TIE_RTOL * (1.0 + abs(best_obj)):
            best_obj, best_knots = obj, finals[i][1]
    return best_knots, best_obj


def hinge_design(x: np.ndarray, knot_indices: Sequence[int]) -> np.ndarray:
    cols = [np.ones_like(x), x] + [np.maximum(x - x[k], 0.0) for k in knot_indices]
    return np.column_stack(cols)


def _segment_fits(x, y, knot_indices, dates):
    X = hinge_design(x, knot_indices)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    fitted = X @ coef
    resid = y - fitted
    bounds = [0, *knot_indices, len(y)]
    segs = []
    slope, intercept = coef[1], coef[0]
    for j, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
        if j > 0:
            # hinge term j switches on at knot x_k: slope += c, intercept -= c * x_k
            k = knot_indices[j - 1]
            slope += coef[1 + j]
            intercept -= coef[1 + j] * x[k]
        segs.append(SegmentFit(
            start_index=a,
            end_index=b,
            slope=float(slope),
            intercept=float(intercept),
            sse=float(resid[a:b] @ resid[a:b]),
            start=dates[a] if dates is not None else a,
            end=dates[b - 1] if dates is not None else b - 1,
        ))
    return tuple(segs), float(resid @ resid)


def detect_knots(series, max_knots: int = 4, criterion="bic", sigma: float | None = None,
                 dates: Sequence | None = None, unit_id: str | None = None,
                 min_gap: int = 1) -> KnotReport:
    """Find slope change-points in a series.

    Parameters
    ----------
    series : RateSeries or array_like
        Values to segment (cumulative counts or rates).
    max_knots : int
        Largest number of knots considered.
    criterion : {"bic", "aic"} or float
        Penalty per knot; see :func:`knot_penalty`.
    sigma : float, optional
        Known noise sd.  When omitted it is estimated from the residuals of
        the best fit with ``max_knots`` knots (falling back to a
        second-difference estimate when that fit leaves no degrees of freedom).
    dates : sequence of date, optional
        Observation dates for array input; knots are reported as dates when
        available and as indices otherwise.
    min_gap : int
        Minimum index distance between consecutive knots and between a knot
        and either end of the series.

    Returns
    -------
    KnotReport
    """
    uid, y, dates = _unpack(series, dates)
    n = len(y)
    if n < 4:
        raise ValueError(f"series has {n} points; at least 4 are needed")
    if max_knots < 0:
        raise ValueError("max_knots must be nonnegative")
    if min_gap < 1:
        raise ValueError("min_gap must be at least 1")
    if (max_knots + 1) * min_gap > n - 1:
        raise ValueError(
            f"max_knots={max_knots} too large for a series of length {n} (min_gap={min_gap})"
        )
    if not np.all(np.isfinite(y)):
        raise ValueError("series contains non-finite values")
    x = _positions(y, dates)

    # the piecewise-linear fit space is invariant to affine maps of y
    loc = float(np.mean(y))
    scale = float(np.std(y)) or 1.0
    ys = (y - loc) / scale
    xs = x - x[0]

    if sigma is None and criterion in ("bic", "aic"):
        full, _ = _dp_best_knots(xs, ys, max_knots, 0.0, min_gap)
        dof = n - 2 - 2 * len(full)
        if dof > 0:
            _, sse_full = _segment_fits(x, y, full, None)
            sigma = math.sqrt(sse_full / dof)
    penalty = knot_penalty(y, criterion, sigma)
    knots, _ = _dp_best_knots(xs, ys, max_knots, penalty / scale ** 2, min_gap)

    segs, sse = _segment_fits(x, y, knots, dates)
    return KnotReport(
        unit_id=unit_id if unit_id is not None else uid,
        knot_indices=tuple(int(k) for k in knots),
        knots=tuple(dates[k] if dates is not None else int(k) for k in knots),
        segment_fits=segs,
        penalty=penalty,
        criterion=str(criterion),
        sse=sse,
        objective=sse + penalty * len(knots),
    )


def fit_trend(x, y) -> TrendFit:
    """Simple linear regression of y on x with a two-sided t-test on the slope."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    if n < 3:
        raise ValueError("slope inference needs at least 3 points")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    if sxx == 0.0:
        raise ValueError("x is constant")
    syy = float(yc @ yc)
    slope = float(xc @ yc) / sxx
    intercept = float(y.mean() - slope * x.mean())
    resid = yc - slope * xc
    sse = float(resid @ resid)
    df = n - 2
    tiny = 1e-24 * max(float(y @ y), 1e-300)
    if syy <= tiny:
        return TrendFit(0.0, float(y.mean()), 0.0, 1.0, 0.0, n)
    r2 = 1.0 - sse / syy
    adj = 1.0 - (1.0 - r2) * (n - 1) / df
    if sse <= 1e-24 * syy:
        return TrendFit(slope, intercept, 0.0, 0.0, 1.0, n)
    se = math.sqrt(sse / df / sxx)
    t = slope / se
    p = float(2.0 * stats.t.sf(abs(t), df))
    return TrendFit(slope, intercept, se, p, float(adj), n)


def last_segment_trend(series, report: KnotReport, dates: Sequence | None = None) -> TrendFit:
    """Linear trend over the final segment, from the last knot to the series end.

    The last knot itself is included (the fit is continuous there).  With no
    knots the whole series is used.
    """
    _, y, dates = _unpack(series, dates)
    x = _positions(y, dates)
    start = report.knot_indices[-1] if report.knot_indices else 0
    if len(y) - start < 3:
        raise ValueError(
            f"final segment has {len(y) - start} points; slope inference needs 3"
        )
    return fit_trend(x[start:], y[start:])
