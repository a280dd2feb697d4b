import json

import pytest

from ddcsense import analysis, cli, dp, globalsens
from ddcsense.estimate import EstimationSolution
from ddcsense.local import read_table1_csv

SMALL = """[model]
num_states = 10
beta = 0.9
[data]
units = 40
periods = 80
[figures]
betas = 0.5, 0.9
[bounds]
targets = RC
upper = 0.75, 0.8
grid_step = 1e-2
[breakdown]
lower = 0.7
upper = 0.8
grid_points = 11
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(SMALL)
    return path


def run(config, out, *extra):
    return cli.main(["--config", str(config), "--out", str(out), *extra])


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_simulate_deterministic_and_creates_dir(config, tmp_path):
    a, b = tmp_path / "a" / "nested", tmp_path / "b"
    assert run(config, a, "--seed", "7", "simulate") == 0
    assert run(config, b, "--seed", "7", "simulate") == 0
    assert (a / "panel.csv").read_bytes() == (b / "panel.csv").read_bytes()
    m = manifest(a)
    assert m["seed"] == 7 and m["status"] == "ok" and len(m["config_hash"]) == 64
    assert m["model"]["beta"] == 0.9 and set(m["model"]["phi"]) == {"phi1", "phi2"}
    assert set(m["model"]["theta"]) == {"mc", "rc"}
    data = dp.PanelDataset.read_csv(a / "panel.csv")
    assert data.state.max() <= 10


def test_seed_changes_output(config, tmp_path):
    run(config, tmp_path / "a", "--seed", "1", "simulate")
    run(config, tmp_path / "b", "--seed", "2", "simulate")
    assert (tmp_path / "a" / "panel.csv").read_bytes() != (tmp_path / "b" / "panel.csv").read_bytes()


def test_env_override(config, tmp_path, monkeypatch):
    monkeypatch.setenv("DDCSENSE_MODEL_BETA", "0.8")
    assert run(config, tmp_path, "simulate") == 0
    assert manifest(tmp_path)["model"]["beta"] == 0.8
    parser = cli.load_config(config, environ={"DDCSENSE_DATA_UNITS": "5"})
    assert parser.getint("data", "units") == 5


def test_config_hash_changes():
    assert cli.config_hash(cli.load_config()) != cli.config_hash(
        cli.load_config(environ={"DDCSENSE_MODEL_RC": "9"}))


def test_bad_data_path(config, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("DDCSENSE_DATA_PATH", str(tmp_path / "missing.csv"))
    assert run(config, tmp_path / "o", "estimate") == 1
    err = capsys.readouterr().err
    assert "load-data" in err and "missing.csv" in err
    m = manifest(tmp_path / "o")
    assert m["status"] == "failed" and "load-data" in m["error"]


def test_missing_config(tmp_path, capsys):
    assert run(tmp_path / "nope.ini", tmp_path / "o", "simulate") == 1
    assert "config" in capsys.readouterr().err


def test_estimate_then_sensitivity(config, tmp_path, monkeypatch):
    est = tmp_path / "est"
    assert run(config, est, "estimate") == 0
    sol = EstimationSolution.read_json(est / "solution.json")
    assert sol.grad_norm < 1e-6 and sol.fp_residual < 1e-8
    monkeypatch.setenv("DDCSENSE_ESTIMATE_SOLUTION", str(est / "solution.json"))
    out = tmp_path / "sens"
    assert run(config, out, "--threads", "2", "sensitivity") == 0
    rows = read_table1_csv(out / "table1.csv")
    assert [r["target"] for r in rows] == list(analysis.TARGETS)
    report = json.loads((out / "sensitivity.json").read_text())
    assert set(report["derivatives"]) == set(analysis.TARGETS)
    assert "load-solution" in [s["stage"] for s in manifest(out)["stages"]]


def test_bounds_nested_and_readable(config, tmp_path):
    assert run(config, tmp_path, "bounds") == 0
    rows = globalsens.read_table2_csv(tmp_path / "table2.csv")
    assert [r["upper_bound_beta"] for r in rows] == [0.75, 0.8]
    assert rows[1]["bound_lo"] <= rows[0]["bound_lo"] and rows[1]["bound_hi"] >= rows[0]["bound_hi"]
    assert all(r["wall_time_s"] > 0 for r in rows)
    results = [globalsens.BoundsResult.from_dict(d)
               for d in json.loads((tmp_path / "bounds.json").read_text())]
    assert results[0].lower == rows[0]["bound_lo"]


def test_monotone(config, tmp_path, monkeypatch):
    # replacement must be observed often enough for the first-stage CCP to be increasing
    for key, value in (("MODEL_NUM_STATES", "20"), ("DATA_UNITS", "100"), ("DATA_PERIODS", "200")):
        monkeypatch.setenv("DDCSENSE_" + key, value)
    assert run(config, tmp_path, "monotone") == 0
    rows = globalsens.MonotonicityVerdict.read_csv(tmp_path / "verdicts.csv")
    assert {r["certificate"] for r in rows} == {"renewal-corollary"}
    assert manifest(tmp_path)["verdict"]["overall"] == globalsens.NONDECREASING
    fig = analysis.read_figure_csv(tmp_path / "figure_data.csv")
    assert {s for _, s, _ in fig} >= {"nfxp_RC", "two_step_RC", "cf_ccp_x20"}


def test_breakdown_degenerate_and_required(config, tmp_path, monkeypatch):
    assert run(config, tmp_path / "a", "breakdown") == 1
    monkeypatch.setenv("DDCSENSE_BREAKDOWN_TAU_STAR", "-100")
    assert run(config, tmp_path / "b", "breakdown") == 0
    res = json.loads((tmp_path / "b" / "breakdown.json").read_text())
    assert res["verdict"] == "all-robust" and res["frontier"] == []
    assert globalsens.BreakdownResult.from_dict(res).verdict == "all-robust"
