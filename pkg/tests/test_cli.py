import json
from importlib import resources
from pathlib import Path

import pytest

from ivgrid import cli
from ivgrid import fixtures as fx
from ivgrid import forecast as F
from ivgrid.network import parse_case, serialize_case
from ivgrid.powerflow import PfOptions, solve_power_flow
from ivgrid.sensitivity import MetricSpec, exogenous_sensitivity

DATA = Path(str(resources.files("ivgrid") / "data"))
PROBLEM = str(DATA / "case14_problem.json")


def run(*argv):
    return cli.main([str(a) for a in argv])


def body(path):
    doc = json.loads(Path(path).read_text())
    doc.pop("header")
    return doc


def csv_rows(path):
    return [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]


@pytest.fixture
def two_bus_case(tmp_path):
    p = tmp_path / "two_bus.json"
    p.write_text(serialize_case(fx.two_bus()))
    return p


def test_gen_data_contract(tmp_path, capsys):
    out = tmp_path / "d.json"
    assert run("gen-data", "--n", 1000, "--v-range", "0.8:1.2", "--seed", 7, "--out", out) == 0
    data = F.TrainingSet.from_dict(json.loads(out.read_text()))
    assert len(data) == 1000
    assert "samples 1000" in capsys.readouterr().out


def test_gen_data_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as err:
        run("gen-data", "--n", 10)
    assert err.value.code == 2
    assert run("gen-data", "--v-range", "1.2:0.8", "--out", tmp_path / "d.json") == 2
    assert "inverted" in capsys.readouterr().err
    assert not (tmp_path / "d.json").exists()


def test_train_roundtrip(tmp_path):
    data = tmp_path / "d.json"
    model = tmp_path / "m.json"
    assert run("gen-data", "--n", 200, "--seed", 1, "--out", data) == 0
    assert run("train", "--data", data, "--hidden", "6", "--epochs", 50, "--id", "res", "--out", model) == 0
    m = F.load_model(model.read_text())
    assert m.id == "res" and m.layer_dims[1] == 6


def test_pf_is_thin_wrapper(tmp_path, two_bus_case, capsys):
    out = tmp_path / "sol.json"
    assert run("pf", "--case", two_bus_case, "--out", out) == 0
    sol = solve_power_flow(fx.two_bus())
    assert body(out) == json.loads(json.dumps(sol.to_dict()))
    header = json.loads(out.read_text())["header"]
    assert Path(out).read_text() == cli._json_doc(header, sol.to_dict())
    assert "vm min 0.887298" in capsys.readouterr().out


def test_pf_with_models(tmp_path):
    out = tmp_path / "sol.json"
    args = ["pf", "--case", DATA / "case14.json", "--u", DATA / "base_u.json", "--out", out]
    for name in ("residential", "commercial"):
        args += ["--models", DATA / f"{name}.json"]
    assert run(*args) == 0
    sol = solve_power_flow(parse_case((DATA / "case14.json").read_text()), fx.load_models(), fx.base_u())
    assert body(out) == json.loads(json.dumps(sol.to_dict()))
    expected = {str(DATA / f) for f in ("case14.json", "base_u.json", "residential.json", "commercial.json")}
    assert set(json.loads(out.read_text())["header"]["inputs"]) == expected


def test_pf_failure_leaves_no_output(tmp_path, capsys):
    case = tmp_path / "heavy.json"
    case.write_text(serialize_case(fx.two_bus(p=0.6, q=0.2)))
    out = tmp_path / "sol.json"
    assert run("pf", "--case", case, "--out", out) == 1
    assert "residual history" in capsys.readouterr().err
    assert sorted(p.name for p in tmp_path.iterdir()) == ["heavy.json"]


def test_bad_inputs_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("pf", "--case", tmp_path / "missing.json", "--out", tmp_path / "o.json") == 2
    assert run("pf", "--case", bad, "--out", tmp_path / "o.json") == 2
    assert run("pf", "--case", DATA / "case14.json", "--out", tmp_path / "o.json") == 2  # models missing
    assert run("sens", "--problem", PROBLEM, "--metric", "voltage_magnitude", "--out", tmp_path / "s.csv") == 2
    assert not (tmp_path / "o.json").exists()


def test_opf_document(tmp_path, capsys):
    out = tmp_path / "opf.json"
    assert run("opf", "--problem", PROBLEM, "--out", out) == 0
    doc = body(out)
    assert doc["converged"]
    assert set(doc["dispatch"]["labels"]) == {"P_g@2", "P_g@3"}
    assert "objective" in capsys.readouterr().out


def test_sens_csv_rows(tmp_path):
    out = tmp_path / "s.csv"
    args = ["sens", "--case", DATA / "case14.json", "--u", DATA / "base_u.json", "--metric",
            "slack_active_power", "--format", "csv", "--out", out]
    for name in ("residential", "commercial"):
        args += ["--models", DATA / f"{name}.json"]
    assert run(*args) == 0
    rows = csv_rows(out)
    entries = [r for r in rows[1:] if not r.startswith("TOTAL")]
    assert len(entries) == 7 * 2  # one per (device, feature)
    sol = solve_power_flow(fx.case14(), fx.load_models(), fx.base_u(), PfOptions(tol=1e-10))
    rep = exogenous_sensitivity(sol, MetricSpec("slack_active_power"))
    assert rows == rep.to_csv().strip().splitlines()


def test_robust_and_mc_deterministic(tmp_path):
    rob = [tmp_path / "r1.json", tmp_path / "r2.json"]
    for p in rob:
        assert run("robust", "--problem", PROBLEM, "--seed", 3, "--out", p) == 0
    assert rob[0].read_bytes() == rob[1].read_bytes()
    doc = body(rob[0])
    assert doc["u_worst"]["temperature"] == 40.0
    outs = [tmp_path / "mc1.csv", tmp_path / "mc2.csv"]
    for p in outs:
        assert run("mc", "--problem", PROBLEM, "--dispatch", rob[0], "--dist",
                   "temperature=normal:32:6:10:40", "--samples", 500, "--seed", 1, "--out", p) == 0
    assert outs[0].read_bytes() == outs[1].read_bytes()
    assert len(csv_rows(outs[0])) == 1 + 2 * 20


def test_mc_usage_error(tmp_path):
    opf = tmp_path / "opf.json"
    assert run("opf", "--problem", PROBLEM, "--out", opf) == 0
    assert run("mc", "--problem", PROBLEM, "--dispatch", opf, "--dist", "temperature=gamma:1:2",
               "--out", tmp_path / "mc.csv") == 2
    assert not (tmp_path / "mc.csv").exists()
