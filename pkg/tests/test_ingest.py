import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import days
from policyeval.ingest import (
    CompletenessIssue,
    CovariateTable,
    IngestError,
    read_case_csv,
    read_completeness_report,
    read_covariate_csv,
    read_population_csv,
    write_case_csv,
    write_completeness_report,
    write_population_csv,
    zscore_rows,
)
from policyeval.panel import PanelDataset

HEADER = "date,county,state,fips,cases,deaths\n"
POP = {"Saline": 120000, "Pulaski": 390000, "Garland": 99000}


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_passthrough(tmp_path):
    f = write(tmp_path, "c.csv", HEADER + "".join(
        f"2020-03-{10 + i},Saline,Arkansas,05125,{c},0\n" for i, c in enumerate([1, 2, 4])))
    p = read_case_csv(f, "Arkansas", POP)
    assert p.unit_ids == ("Saline",)
    assert p.cases("Saline").tolist() == [1, 2, 4]
    assert p.population.tolist() == [120000]


def test_zero_fill_before_first_report(tmp_path):
    rows = [f"2020-03-0{d},Pulaski,Arkansas,05119,{d},0\n" for d in range(1, 6)]
    rows += [f"2020-03-0{d},Saline,Arkansas,05125,{10 * d},0\n" for d in range(3, 6)]
    p = read_case_csv(write(tmp_path, "c.csv", HEADER + "".join(rows)), "Arkansas", POP)
    assert p.cases("Saline").tolist() == [0, 0, 30, 40, 50]


def test_interior_gap_carried_forward_and_reported(tmp_path):
    rows = [f"2020-03-0{d},Pulaski,Arkansas,05119,{d},0\n" for d in range(1, 6)]
    rows += [f"2020-03-0{d},Saline,Arkansas,05125,{10 * d},0\n" for d in (1, 2, 5)]
    issues = []
    p = read_case_csv(write(tmp_path, "c.csv", HEADER + "".join(rows)), "Arkansas", POP, issues=issues)
    assert p.cases("Saline").tolist() == [10, 20, 20, 20, 50]
    assert [(i.unit, i.action) for i in issues] == [("Saline", "carried_forward")]


def test_clamp_repair(tmp_path):
    rows = [f"2020-03-0{i + 1},Saline,Arkansas,05125,{c},0\n" for i, c in enumerate([5, 4, 6])]
    f = write(tmp_path, "c.csv", HEADER + "".join(rows))
    issues = []
    p = read_case_csv(f, "Arkansas", POP, issues=issues)
    assert p.cases("Saline").tolist() == [5, 5, 6]
    assert issues[0].action == "clamped"
    with pytest.raises(IngestError, match="decrease"):
        read_case_csv(f, "Arkansas", POP, repair="fail")


def test_malformed_row_line_number(tmp_path):
    f = write(tmp_path, "c.csv", HEADER + "2020-03-01,Saline,Arkansas,05125,1,0\n2020-03-02,Saline,Arkansas\n")
    with pytest.raises(IngestError) as e:
        read_case_csv(f, "Arkansas", POP)
    assert e.value.line == 3


def test_bad_value_line_number(tmp_path):
    f = write(tmp_path, "c.csv", HEADER + "2020-03-01,Saline,Arkansas,05125,x,0\n")
    with pytest.raises(IngestError) as e:
        read_case_csv(f, "Arkansas", POP)
    assert e.value.line == 2


def test_empty_file_and_bad_header(tmp_path):
    with pytest.raises(IngestError, match="empty"):
        read_case_csv(write(tmp_path, "e.csv", ""), "Arkansas", POP)
    with pytest.raises(IngestError, match="header"):
        read_case_csv(write(tmp_path, "h.csv", "a,b\n"), "Arkansas", POP)


def test_unknown_state(tmp_path):
    f = write(tmp_path, "c.csv", HEADER + "2020-03-01,Saline,Arkansas,05125,1,0\n")
    with pytest.raises(IngestError, match="no rows"):
        read_case_csv(f, "Texas", POP)


def test_duplicate_rows(tmp_path):
    f = write(tmp_path, "c.csv", HEADER + "2020-03-01,Saline,Arkansas,05125,1,0\n" * 2)
    with pytest.raises(IngestError, match="duplicate"):
        read_case_csv(f, "Arkansas", POP)


def test_unknown_county_and_missing_population(tmp_path):
    f = write(tmp_path, "c.csv", HEADER + "2020-03-01,Saline,Arkansas,05125,1,0\n"
              "2020-03-01,Unknown,Arkansas,,3,0\n2020-03-01,Nowhere,Arkansas,05999,2,0\n")
    issues = []
    p = read_case_csv(f, "Arkansas", POP, issues=issues)
    assert p.unit_ids == ("Saline",)
    assert {i.unit for i in issues} == {"Unknown", "Nowhere"}


def _random_panel(seed, n_units=3, n_days=6):
    rng = np.random.default_rng(seed)
    cases = np.cumsum(rng.integers(0, 9, size=(n_units, n_days)), axis=1)
    names = [f"County {i}" for i in range(n_units)]
    return PanelDataset(names, days(n_days), cases, rng.integers(100, 10**6, n_units),
                        [f"05{i:03d}" for i in range(n_units)])


@given(st.integers(0, 2**31), st.integers(1, 5), st.integers(2, 9))
def test_csv_round_trip(tmp_path_factory, seed, n_units, n_days):
    d = tmp_path_factory.mktemp("rt")
    panel = _random_panel(seed, n_units, n_days)
    write_case_csv(panel, d / "c.csv", "Arkansas")
    write_population_csv(panel, d / "p.csv")
    again = read_case_csv(d / "c.csv", "Arkansas", read_population_csv(d / "p.csv"))
    assert again == panel


@given(st.integers(0, 2**31), st.randoms())
def test_row_order_independence(tmp_path_factory, seed, rnd):
    d = tmp_path_factory.mktemp("shuffle")
    panel = _random_panel(seed, 4, 7)
    write_case_csv(panel, d / "c.csv", "Arkansas")
    lines = (d / "c.csv").read_text().splitlines(keepends=True)
    body = lines[1:]
    rnd.shuffle(body)
    (d / "s.csv").write_text(lines[0] + "".join(body))
    pops = dict(zip(panel.unit_ids, panel.population.tolist()))
    assert read_case_csv(d / "s.csv", "Arkansas", pops) == read_case_csv(d / "c.csv", "Arkansas", pops)


def test_completeness_round_trip(tmp_path):
    items = [CompletenessIssue("a", "x", "dropped"), CompletenessIssue("b", "y", "excluded_from_sc")]
    write_completeness_report(items, tmp_path / "r.jsonl")
    assert read_completeness_report(tmp_path / "r.jsonl") == items


def test_two_point_zscore(tmp_path):
    f = write(tmp_path, "cov.csv", "county,population_density\nA,10\nB,30\n")
    t = read_covariate_csv(f, ["population_density"])
    np.testing.assert_allclose(t.normalized[0], [-1 / np.sqrt(2), 1 / np.sqrt(2)], rtol=1e-12)


def test_constant_covariate_zero(tmp_path):
    f = write(tmp_path, "cov.csv", "county,hospitals\nA,2\nB,2\nC,2\n")
    assert np.all(read_covariate_csv(f, ["hospitals"]).normalized == 0)


def test_override_applied_before_normalization(tmp_path):
    f = write(tmp_path, "cov.csv", "county,fips,poverty_rate,males\nA,05001,10,1\nB,05002,,2\nC,05003,30,4\n")
    o = write(tmp_path, "ov.csv", "county,poverty_rate\nB,20\n")
    t = read_covariate_csv(f, ["poverty_rate", "males"], override_path=o)
    assert t.unit_ids == ("A", "B", "C")
    np.testing.assert_allclose(t.values[0], [10, 20, 30])
    np.testing.assert_allclose(t.normalized[0], [-1, 0, 1])
    without = read_covariate_csv(f, ["poverty_rate", "males"])
    assert without.unit_ids == ("A", "C")
    assert without.issues[0].unit == "B"


def test_missing_unit_reported(tmp_path):
    f = write(tmp_path, "cov.csv", "county,males\nA,1\nB,2\n")
    t = read_covariate_csv(f, ["males"], units=["A", "B", "Z"])
    assert [(i.unit, i.action) for i in t.issues] == [("Z", "excluded_from_sc")]
    with pytest.raises(IngestError, match="incomplete"):
        read_covariate_csv(f, ["males"], units=["A", "B", "Z"], on_missing="fail")


def test_missing_column(tmp_path):
    f = write(tmp_path, "cov.csv", "county,males\nA,1\n")
    with pytest.raises(IngestError, match="missing covariate"):
        read_covariate_csv(f, ["males", "svi"])


@given(st.lists(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=8), min_size=1, max_size=4)
       .filter(lambda rows: len({len(r) for r in rows}) == 1))
def test_normalization_idempotent(rows):
    X = np.array(rows)
    once = zscore_rows(X)
    np.testing.assert_allclose(zscore_rows(once), once, atol=1e-9)
    for r, raw in zip(once, X):
        if np.ptp(raw) > 1e-6 * max(1.0, np.abs(raw).max()):
            assert abs(r.mean()) < 1e-9
            assert abs(r.std(ddof=1) - 1) < 1e-9


def test_covariate_table_dict_round_trip():
    t = CovariateTable(["a", "b", "c"], ["x", "y"], [[1, 2, 3], [4, 4, 5]])
    t2 = CovariateTable.from_dict(t.to_dict())
    np.testing.assert_array_equal(t2.normalized, t.normalized)
    assert t2.unit_ids == t.unit_ids
    sub = t.select(["y"], ["c", "a"])
    assert sub.column("c").tolist() == [t.column("c")[1]]
