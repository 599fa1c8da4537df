import json
import subprocess
import sys

import pytest

from policyeval import cli
from policyeval.cli import RunConfig, load_config, main, run
from policyeval.ingest import read_completeness_report
from policyeval.simulate import simulate_did_panel, simulate_sc_panel, write_inputs

COVS = "males,juveniles,population_density,noise"


@pytest.fixture(scope="module")
def did_inputs(tmp_path_factory):
    d = tmp_path_factory.mktemp("did")
    panel, _ = simulate_did_panel(seed=1, n_units=10)
    return d, write_inputs(panel, d / "in")


@pytest.fixture(scope="module")
def sc_inputs(tmp_path_factory):
    d = tmp_path_factory.mktemp("sc")
    panel, table, _, w = simulate_sc_panel(n_donors=8, seed=2, effect=1e-3)
    return d, write_inputs(panel, d / "in", covariates=table), w


def args_for(paths, out, **extra):
    a = []
    for k, v in {**paths, "treated_unit": "Treated", "output_dir": str(out), **extra}.items():
        a += [f"--{k}", str(v)]
    return a


def test_config_file_and_overrides(tmp_path):
    (tmp_path / "run.toml").write_text(
        'case_csv = "cases.csv"\nstate = "Texas"\nalpha = 0.1\nissue_date = 2020-04-01\n'
        'covariates = ["males", "svi"]\nmax_abs_dev = 0.5\n')
    cfg = load_config(tmp_path / "run.toml", {"alpha": "0.01", "state": None})
    assert cfg.state == "Texas" and cfg.alpha == 0.01
    assert cfg.case_csv == str(tmp_path / "cases.csv")
    assert cfg.covariates == ("males", "svi")
    assert str(cfg.issue_date) == "2020-04-01"
    assert load_config(None, {"max_abs_dev": "none"}).max_abs_dev is None
    (tmp_path / "bad.toml").write_text("nonsense = 1\n")
    with pytest.raises(cli.ConfigError, match="unknown"):
        load_config(tmp_path / "bad.toml")
    with pytest.raises(cli.ConfigError):
        load_config(None, {"sc_mode": "sometimes"})


def test_every_key_has_a_flag():
    p = cli.build_parser()
    flags = {a.dest for a in p._actions}
    assert set(cli._FIELDS) <= flags


def test_did_pipeline(did_inputs, capsys):
    d, paths = did_inputs
    out = d / "out"
    assert main(["ingest", *args_for(paths, out)]) == 0
    assert main(["did", *args_for(paths, out)]) == 0
    doc = json.loads((out / "did.json").read_text())
    tau = doc["pools"]["candidates"]["fit"]["tau"]
    assert abs(tau + 1e-3) < 0.1e-3
    assert "all_others" in doc["pools"]
    for name in ("knots.json", "knots_plot.csv", "screen.json", "screen.csv", "did_tables.txt", "did_plot.csv"):
        assert (out / name).exists()
    header = (out / "knots_plot.csv").read_text().splitlines()[0]
    assert header == "unit,date,observed,fitted,knot"
    assert (out / "did_plot.csv").read_text().splitlines()[0] == "pool,date,period,treated,control_mean"
    assert main(["report", *args_for(paths, out)]) == 0
    assert "DID" in (out / "report.txt").read_text()


def test_determinism_and_stage_isolation(did_inputs):
    d, paths = did_inputs
    outs = [d / "a", d / "b"]
    for o in outs:
        cfg = RunConfig(**paths, treated_unit="Treated", output_dir=str(o))
        run("ingest", cfg)
        run("did", cfg)
    for name in ("knots.json", "screen.json", "did.json", "panel.csv", "did_plot.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    # rerunning stages from persisted files reproduces their outputs
    cfg = RunConfig(**paths, treated_unit="Treated", output_dir=str(outs[0]))
    before = {n: (outs[0] / n).read_bytes() for n in ("screen.json", "did.json")}
    run("select", cfg)
    cli.cmd_did(cfg, upstream=False)
    for n, b in before.items():
        assert (outs[0] / n).read_bytes() == b


def test_empty_screen_is_a_warning(did_inputs, capsys):
    d, paths = did_inputs
    out = d / "empty"
    assert main(["ingest", *args_for(paths, out)]) == 0
    assert main(["did", *args_for(paths, out, alpha=0.0)]) == 0
    doc = json.loads((out / "did.json").read_text())
    assert list(doc["pools"]) == ["all_others"]
    assert any("empty" in w for w in doc["warnings"])


def test_input_errors(tmp_path, capsys):
    (tmp_path / "empty.csv").write_text("")
    (tmp_path / "pop.csv").write_text("county,population\nA,10\n")
    base = ["--case_csv", str(tmp_path / "empty.csv"), "--population_csv", str(tmp_path / "pop.csv"),
            "--output_dir", str(tmp_path / "o")]
    assert main(["ingest", *base]) == 2
    assert "empty" in capsys.readouterr().err
    assert main(["ingest", "--case_csv", str(tmp_path / "missing.csv"),
                 "--population_csv", str(tmp_path / "pop.csv")]) == 2
    assert main(["knots", "--output_dir", str(tmp_path / "nothing")]) == 2
    assert main(["ingest", "--alpha", "abc"]) == 2


def test_failed_ingest_writes_nothing(sc_inputs, tmp_path):
    _, paths, _ = sc_inputs
    out = tmp_path / "o"
    # the default covariate list names columns the simulated file lacks
    assert main(["ingest", *args_for(paths, out)]) == 2
    assert not out.exists() or not any(out.iterdir())


def test_numerical_failure_exit_code(did_inputs, monkeypatch):
    d, paths = did_inputs
    out = d / "num"
    assert main(["ingest", *args_for(paths, out)]) == 0

    def boom(*a, **k):
        raise cli.DegenerateDesignError("regressor 'dt' is constant")

    monkeypatch.setattr(cli, "fit_ols", boom)
    assert main(["did", *args_for(paths, out)]) == 3


def test_covariates_missing_county_reported(sc_inputs):
    d, paths, _ = sc_inputs
    cov = open(paths["covariate_csv"]).read().splitlines()
    short = d / "short.csv"
    short.write_text("\n".join(l for l in cov if not l.startswith("County 03")) + "\n")
    out = d / "short_out"
    cfg = RunConfig(**{**paths, "covariate_csv": str(short)}, treated_unit="Treated",
                    output_dir=str(out), covariates=COVS)
    run("ingest", cfg)
    issues = read_completeness_report(out / "completeness.jsonl")
    assert [(i.unit, i.action) for i in issues] == [("County 03", "excluded_from_sc")]


def test_synth_pipeline(sc_inputs):
    d, paths, w = sc_inputs
    out = d / "out"
    cfg = RunConfig(**paths, treated_unit="Treated", output_dir=str(out), covariates=COVS,
                    sc_pool="all", sc_budget=200)
    run("ingest", cfg)
    res = run("covariates", cfg)
    assert res["selected"] and "noise" not in res["selected"]
    res = run("synth", cfg)
    assert res["pre_mspe"] < 1e-8
    assert res["tau"] == pytest.approx(-1e-3, rel=0.05)
    doc = json.loads((out / "synth.json").read_text())
    assert abs(sum(doc["weights"].values()) - 1) < 1e-12
    assert (out / "synth_plot.csv").read_text().splitlines()[0] == "date,period,treated,synthetic"
    assert "dc:dt" in (out / "synth_table.txt").read_text()
    first = (out / "synth.json").read_bytes()
    run("synth", cfg)
    assert (out / "synth.json").read_bytes() == first


def test_synth_aborts_without_covariates(sc_inputs, capsys):
    d, paths, _ = sc_inputs
    out = d / "nocov"
    a = args_for(paths, out, covariates=COVS, glm_alpha=0.0, sc_pool="all")
    assert main(["ingest", *a]) == 0
    assert main(["covariates", *a]) == 0
    assert main(["synth", *a]) == 2
    assert "glm_alpha" in capsys.readouterr().err


def test_selftest(tmp_path):
    assert main(["selftest", "--output_dir", str(tmp_path)]) == 0
    lines = (tmp_path / "selftest.jsonl").read_text().splitlines()
    assert lines and all(json.loads(l)["pass"] for l in lines)


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "policyeval", "selftest", "--output_dir", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 0
    assert json.loads(r.stdout)["failed"] == []
