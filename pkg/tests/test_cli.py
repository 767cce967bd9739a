import json
import shutil
import subprocess
from importlib import resources

import jsonschema
import pytest

from contdid.cli import main
from contdid.simulate import DgpSpec, generate

SCHEMA = json.loads(resources.files("contdid").joinpath("schema/report-v1.json").read_text())


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def write_csv(path, spec):
    panel, _ = generate(spec)
    panel.to_frame().to_csv(path, index=False, float_format="%.17g")
    return path


@pytest.fixture
def static_csv(tmp_path):
    return write_csv(tmp_path / "static.csv", DgpSpec(n=400, d1_low=0, d1_high=2, p_stay=0.4, slope_sd=0.3, seed=1))


@pytest.fixture
def staggered_csv(tmp_path):
    spec = DgpSpec(n=600, T=4, regime="staggered", p_stay=0.6, dd_low=1, dd_high=1, d1_low=0, d1_high=2, seed=2)
    return write_csv(tmp_path / "staggered.csv", spec)


def test_estimate_delta2_both_methods(capsys, static_csv):
    code, out, _ = run(capsys, "estimate", "--input", static_csv, "--target", "delta2", "--method", "both",
                       "--boot", 20)
    assert code == 0
    report = json.loads(out)
    jsonschema.validate(report, SCHEMA)
    methods = {e["method"] for e in report["estimates"] if e["target"] == "delta2"}
    assert methods == {"regression", "pscore"}
    diff = [d for d in report["differences"] if d["target"] == "delta2"]
    reg = next(e["value"] for e in report["estimates"] if e["target"] == "delta2" and e["method"] == "regression")
    ps = next(e["value"] for e in report["estimates"] if e["target"] == "delta2" and e["method"] == "pscore")
    assert diff and diff[0]["regression_minus_pscore"] == pytest.approx(reg - ps, abs=1e-12)
    for est in report["estimates"]:
        assert est["ci_kind"] == "percentile" and est["se"] is not None
        assert est["tuning"]


def test_estimate_all_stayers_exit_2(capsys, tmp_path):
    path = write_csv(tmp_path / "stay.csv", DgpSpec(n=50, p_stay=1.0))
    code, out, _ = run(capsys, "estimate", "--input", path, "--target", "delta1", "--boot", 0)
    assert code == 2
    report = json.loads(out)
    assert report["error"]["code"] == "NoMovers"
    jsonschema.validate(report, SCHEMA)


def test_estimate_dynamic_blocks(capsys, staggered_csv):
    code, out, _ = run(capsys, "estimate", "--input", staggered_csv, "--target", "delta_plus", "--lmax", 2,
                       "--boot", 0)
    assert code == 0
    report = json.loads(out)
    jsonschema.validate(report, SCHEMA)
    targets = {e["target"] for e in report["estimates"]}
    assert {"delta_plus_0", "delta_plus_1", "delta_plus_2", "delta_plus"} <= targets
    assert set(report["baseline_partition"]) >= {"above", "below", "mixed"}


def test_estimate_tsv(capsys, staggered_csv):
    code, out, _ = run(capsys, "estimate", "--input", staggered_csv, "--target", "delta_plus", "--boot", 0,
                       "--format", "tsv")
    assert code == 0
    header, *rows = out.strip().split("\n")
    assert header.split("\t")[:2] == ["estimator", "target"] or "target" in header.split("\t")
    assert len(rows) >= 3


def test_estimate_nostayers_heuristic(capsys, tmp_path):
    path = write_csv(tmp_path / "cont.csv", DgpSpec(n=800, p_stay=0.0, dd_low=0.0, dd_high=1.0, d1_high=2))
    code, out, _ = run(capsys, "estimate", "--input", path, "--target", "delta1", "--nostayers",
                       "--delta-grid", "0.3,0.1", "--boot", 10)
    assert code == 0
    (est,) = json.loads(out)["estimates"]
    assert est["ci_kind"] == "heuristic" and len(est["diagnostics"]["curve"]) == 2


def test_usage_errors_exit_1(capsys, static_csv, tmp_path):
    code, _, err = run(capsys, "estimate", "--input", static_csv, "--delta-grid", "0.1", "--boot", 0)
    assert code == 1 and "delta-grid" in err
    code, _, _ = run(capsys, "estimate", "--input", tmp_path / "missing.csv")
    assert code == 1
    with pytest.raises(SystemExit) as exc:
        main(["estimate", "--input", str(static_csv), "--kernel", "triangle"])
    assert exc.value.code == 1


def test_bad_input_exit_2(capsys, tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("unit,time,d,y\n1,1,0,0\n1,1,1,1\n2,1,0,0\n2,2,0,0\n")
    code, out, _ = run(capsys, "estimate", "--input", path, "--boot", 0)
    assert code == 2 and json.loads(out)["error"]["code"]


def test_estimate_deterministic(capsys, static_csv):
    outs = [run(capsys, "estimate", "--input", static_csv, "--target", "delta1,delta2", "--boot", 15,
                "--seed", 3)[1] for _ in range(2)]
    assert outs[0] == outs[1]


def test_diagnose(capsys, static_csv):
    code, out, _ = run(capsys, "diagnose", "--input", static_csv)
    assert code == 0
    report = json.loads(out)
    jsonschema.validate(report, SCHEMA)
    assert 0 < report["exact_stayer_share"] < 1


def test_simulate_roundtrip(capsys, tmp_path):
    csv = tmp_path / "sim.csv"
    truth = tmp_path / "truth.json"
    code, _, _ = run(capsys, "simulate", "--set", "n=200", "--set", "slope_mean=1.5", "--seed", 4,
                     "--output", csv, "--truth", truth)
    assert code == 0
    report = json.loads(truth.read_text())
    jsonschema.validate(report, SCHEMA)
    assert report["truth"]["delta1"] == pytest.approx(1.5, abs=1e-12)
    panel, _ = generate(DgpSpec(n=200, slope_mean=1.5, seed=4))
    code, out, _ = run(capsys, "estimate", "--input", csv, "--target", "delta1", "--boot", 0)
    assert code == 0
    from contdid.estimators import ampos_reg
    assert json.loads(out)["estimates"][0]["value"] == ampos_reg(panel).value


def test_simulate_invalid_spec(capsys):
    code, out, _ = run(capsys, "simulate", "--set", "p_stay=3")
    assert code == 2 and json.loads(out)["error"]["code"] == "InvalidSpec"


def test_montecarlo_single_rep(capsys):
    code, out, _ = run(capsys, "montecarlo", "--set", "n=200", "--reps", 1, "--format", "tsv")
    assert code == 0
    header, *rows = out.rstrip("\n").split("\n")
    cols = header.split("\t")
    for row in rows:
        cells = dict(zip(cols, row.split("\t")))
        assert cells["mcse"] == ""


def test_montecarlo_json_deterministic(capsys):
    argv = ("montecarlo", "--set", "n=200", "--reps", 3, "--seed", 5, "--estimators", "ampos_reg,twfe")
    a = run(capsys, *argv)
    b = run(capsys, *argv)
    assert a[0] == 0 and a[1] == b[1]
    report = json.loads(a[1])
    jsonschema.validate(report, SCHEMA)
    assert {r["estimator"] for r in report["rows"]} == {"ampos_reg", "twfe"}


@pytest.mark.skipif(shutil.which("contdid") is None, reason="console script not installed")
def test_console_script(static_csv):
    proc = subprocess.run(["contdid", "estimate", "--input", str(static_csv), "--boot", "0"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["estimates"][0]["target"] == "delta1"
