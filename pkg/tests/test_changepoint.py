import datetime as dt
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import days
from policyeval.changepoint import (
    KnotReport,
    detect_knots,
    fit_trend,
    knot_penalty,
    last_segment_trend,
)
from policyeval.oracle import enumerate_knots
from policyeval.panel import RateSeries


def test_noiseless_single_break():
    r = detect_knots([0, 1, 2, 3, 6, 9, 12], max_knots=2)
    assert r.knot_indices == (3,)
    assert [round(s.slope, 10) for s in r.segment_fits] == [1.0, 3.0]
    assert r.sse < 1e-20


def test_linear_series_has_no_knots():
    r = detect_knots(2.0 + 0.5 * np.arange(20), max_knots=3)
    assert r.knot_indices == ()
    assert len(r.segment_fits) == 1


def test_noisy_two_regime_close_to_truth():
    rng = np.random.default_rng(11)
    x = np.arange(30.0)
    y = np.where(x < 15, x, 15 + 3 * (x - 15)) + rng.normal(0, 1, 30)
    r = detect_knots(y, max_knots=3, sigma=1.0)
    # brute force over single-knot placements gives the reference location
    k1, _ = enumerate_knots(y, 1, 0.0)
    assert r.knot_indices == k1
    assert abs(k1[0] - 15) <= 1


def test_input_errors():
    with pytest.raises(ValueError, match="at least 4"):
        detect_knots([1, 2, 3])
    with pytest.raises(ValueError, match="nonnegative"):
        detect_knots(np.arange(10), max_knots=-1)
    with pytest.raises(ValueError, match="too large"):
        detect_knots(np.arange(6), max_knots=5)
    with pytest.raises(ValueError, match="non-finite"):
        detect_knots([0, 1, np.nan, 3, 4], max_knots=1)


def test_knot_report_invariants_and_json():
    d = days(15)
    y = np.concatenate([np.arange(8.0), 7 + 4 * np.arange(1, 8.0)])
    r = detect_knots(y, 3, dates=d, unit_id="u")
    assert all(0 < k < len(y) - 1 for k in r.knot_indices)
    assert list(r.knot_indices) == sorted(set(r.knot_indices))
    segs = r.segment_fits
    assert segs[0].start_index == 0 and segs[-1].end_index == len(y)
    assert all(a.end_index == b.start_index for a, b in zip(segs, segs[1:]))
    assert r.knots == tuple(d[k] for k in r.knot_indices)
    back = KnotReport.from_dict(json.loads(r.to_json()))
    assert back == r


def test_rate_series_input():
    s = RateSeries("u", days(7), [0, 1, 2, 3, 6, 9, 12])
    r = detect_knots(s, 2)
    assert r.unit_id == "u"
    assert r.knots == (days(7)[3],)


def test_penalties():
    y = np.arange(10.0)
    assert knot_penalty(y, 2.5) == 2.5
    assert knot_penalty(y, "bic", sigma=1.0) == pytest.approx(2 * np.log(10))
    assert knot_penalty(y, "aic", sigma=2.0) == pytest.approx(16.0)
    with pytest.raises(ValueError):
        knot_penalty(y, "xyz")


@given(st.integers(0, 2**31), st.integers(6, 16), st.integers(0, 3), st.floats(0.0, 5.0),
       st.integers(1, 2))
def test_dp_matches_enumeration(seed, n, max_knots, penalty, min_gap):
    rng = np.random.default_rng(seed)
    y = np.cumsum(rng.normal(size=n)) + rng.normal(size=n)
    max_knots = min(max_knots, (n - 1) // min_gap - 1)
    r = detect_knots(y, max_knots, criterion=penalty, min_gap=min_gap)
    _, best = enumerate_knots(y, max_knots, penalty, min_gap=min_gap)
    assert r.objective <= best + 1e-8 * (1 + abs(best))
    assert r.objective >= best - 1e-8 * (1 + abs(best))


@given(st.integers(0, 2**31), st.integers(-50, 50))
def test_time_shift_equivariance(seed, shift):
    rng = np.random.default_rng(seed)
    y = np.concatenate([np.arange(10.0), 9 + 3 * np.arange(1, 11.0)]) + rng.normal(0, 0.3, 20)
    d = days(20)
    ds = [x + dt.timedelta(days=shift) for x in d]
    a = detect_knots(y, 3, dates=d)
    b = detect_knots(y, 3, dates=ds)
    assert b.knots == tuple(k + dt.timedelta(days=shift) for k in a.knots)
    for sa, sb in zip(a.segment_fits, b.segment_fits):
        assert sb.slope == pytest.approx(sa.slope, rel=1e-9, abs=1e-9)


@given(st.integers(0, 2**31))
def test_deterministic(seed):
    y = np.cumsum(np.random.default_rng(seed).normal(size=18))
    assert detect_knots(y, 3) == detect_knots(y.copy(), 3)


def test_last_segment_perfect_fit():
    y = np.concatenate([np.zeros(5), 2.5 * np.arange(1, 8)])
    r = detect_knots(y, 2)
    t = last_segment_trend(y, r)
    assert t.slope == pytest.approx(2.5)
    assert t.adj_r_squared == 1.0


def test_last_segment_constant():
    y = np.concatenate([np.arange(6.0), np.full(6, 5.0)])
    r = detect_knots(y, 2)
    assert r.knot_indices == (5,)
    t = last_segment_trend(y, r)
    assert t.slope == 0.0 and t.p_value == pytest.approx(1.0)


def test_last_segment_too_short():
    y = np.arange(6.0)
    fake = KnotReport("", (4,), (4,), (), 0.0, "bic", 0.0, 0.0)
    with pytest.raises(ValueError, match="3"):
        last_segment_trend(y, fake)


def test_fit_trend_against_textbook_formula():
    rng = np.random.default_rng(2)
    x = np.arange(12.0)
    y = 1 + 0.7 * x + rng.normal(size=12)
    t = fit_trend(x, y)
    b, a = np.polyfit(x, y, 1)
    assert t.slope == pytest.approx(b) and t.intercept == pytest.approx(a)
    r2 = np.corrcoef(x, y)[0, 1] ** 2
    assert t.adj_r_squared == pytest.approx(1 - (1 - r2) * 11 / 10)
