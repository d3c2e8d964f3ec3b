import csv
import io
import json
import math

import pytest

from flatzone import __version__, cli


def run(argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli.main(argv, stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


def blocks(text):
    """Data blocks of a CSV document, comment lines dropped, split on blank lines."""
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    out, cur = [], []
    for ln in lines:
        if ln.strip():
            cur.append(ln)
        elif cur:
            out.append(cur)
            cur = []
    if cur:
        out.append(cur)
    return [list(csv.DictReader(b)) for b in out]


def test_transform_blocks():
    code, out, _ = run(["transform", "--A", "1", "--gamma", "1", "--sigma", "1", "--samples", "5"])
    assert code == 0
    assert out.startswith(f"# flatzone {__version__}\n# config ")
    first, second = blocks(out)
    assert list(first[0]) == ["s", "H", "psi"] and len(first) == 5
    assert list(second[0]) == ["v", "g", "gprime"] and len(second) == 5
    row = next(r for r in first if abs(float(r["s"]) - 0.8) < 1e-12)
    assert float(row["psi"]) == pytest.approx(0.48, abs=1e-12)
    assert float(second[0]["v"]) == 0.0 and float(second[0]["g"]) == 1.0


def test_transform_summary_goes_to_report(tmp_path):
    rep = tmp_path / "t.json"
    code, _, _ = run(["transform", "--gamma", "0.5", "--samples", "8", "--report", str(rep)])
    assert code == 0
    data = json.loads(rep.read_text())
    assert data["config"]["nonlinearity"]["gamma"] == 0.5
    assert data["version"] == __version__


def test_shoot_benchmark(tmp_path):
    rep = tmp_path / "s.json"
    code, out, _ = run(["shoot", "--lambda", "6", "--samples", "16", "--report", str(rep)])
    assert code == 0
    data = json.loads(rep.read_text())
    assert {"ell", "lambda", "R_ell", "R_L", "critical_lambda_for_R"} <= set(data)
    assert data["R_ell"] == pytest.approx(1.0, abs=1e-8)
    (rows,) = blocks(out)
    assert float(rows[0]["s"]) == 0.0 and float(rows[0]["v"]) == data["ell"]
    assert float(rows[0]["vprime"]) == 0.0


def test_shoot_without_threshold(tmp_path):
    rep = tmp_path / "s.json"
    code, _, _ = run(["shoot", "--gamma", "2", "--lambda", "1", "--report", str(rep)])
    assert code == 0
    data = json.loads(rep.read_text())
    assert data["R_L"]["infinite"] is True


def test_solve_benchmark(tmp_path):
    out_csv, rep = tmp_path / "u.csv", tmp_path / "u.json"
    code, _, _ = run(["solve", "--lambda", "6", "--m", "2001", "--out", str(out_csv),
                      "--report", str(rep)])
    assert code == 0
    (rows,) = blocks(out_csv.read_text())
    assert list(rows[0]) == ["coord", "v", "u", "flat"]
    data = json.loads(rep.read_text())
    assert data["exact_reference"]["max_abs_error"] <= 1e-4
    assert data["solve"]["flat_bounds"] in (None, [0.0, 0.0])
    assert data["thresholds"]["lambda_lower_linear"] == pytest.approx(2.0)
    assert "touching_fit" in data["diagnostics"]


def test_solve_plateau_width(tmp_path):
    rep = tmp_path / "u.json"
    code, _, _ = run(["solve", "--lambda", "12", "--m", "2001", "--out", str(tmp_path / "u.csv"),
                      "--report", str(rep)])
    assert code == 0
    a, b = json.loads(rep.read_text())["solve"]["flat_bounds"]
    half = 1.0 - math.sqrt(0.5)
    assert abs(b - half) <= 2e-3 and abs(-a - half) <= 2e-3


def test_invalid_gamma_writes_nothing(tmp_path):
    out_csv, rep = tmp_path / "u.csv", tmp_path / "u.json"
    code, out, err = run(["solve", "--gamma", "-1", "--lambda", "6", "--out", str(out_csv),
                          "--report", str(rep)])
    assert code == 2
    assert out == "" and err
    assert not out_csv.exists() and not rep.exists()


def test_numerical_failure_exit(tmp_path, monkeypatch):
    from flatzone.bvp import ConvergenceFailure

    def boom(*a, **k):
        raise ConvergenceFailure("no convergence", report={"iterations": 7})

    monkeypatch.setattr(cli, "solve_auto", boom)
    rep = tmp_path / "fail.json"
    code, out, _ = run(["solve", "--lambda", "6", "--report", str(rep)])
    assert code == 3 and out == ""
    data = json.loads(rep.read_text())
    assert data["details"]["iterations"] == 7 and data["config"]["lambda"] == 6.0


def test_threshold_reports():
    code, out, _ = run(["threshold", "--m", "1001", "--tol-lambda", "0.005"])
    assert code == 0
    data = json.loads(out)
    assert data["Lambda_hat"] == pytest.approx(6.0, abs=0.01)
    assert data["lambda_lower_linear"] == pytest.approx(2.0)
    half = json.loads(run(["threshold", "--gamma", "0.5", "--m", "401"])[1])
    assert half["lambda_ne_upper"] >= half["Lambda_hat"]
    two = json.loads(run(["threshold", "--gamma", "2", "--m", "201"])[1])
    assert two["regime"] == "AlwaysExists" and "Lambda_hat" not in two


def test_sweep_dichotomy():
    code, out, _ = run(["sweep", "--lambda-range", "1:12:1", "--m", "801"])
    assert code == 0
    (rows,) = blocks(out)
    lam = [float(r["lambda"]) for r in rows]
    assert lam == sorted(lam) and len(lam) == 12
    width = {float(r["lambda"]): float(r["flat_width"]) for r in rows}
    assert all(width[x] == 0.0 for x in lam if x <= 6)
    assert all(width[x] > 0.0 for x in lam if x >= 7)
    mu = [float(r["max_u"]) for r in rows]
    assert all(b >= a for a, b in zip(mu, mu[1:]))


def test_sweep_empty_range():
    assert run(["sweep", "--lambda-range", "5:1:1"])[0] == 2


def test_outputs_are_deterministic(tmp_path):
    texts = []
    for k in range(2):
        o, r = tmp_path / f"o{k}.csv", tmp_path / f"r{k}.json"
        assert run(["solve", "--lambda", "9", "--m", "401", "--out", str(o), "--report", str(r)])[0] == 0
        texts.append((o.read_bytes(), r.read_bytes()))
    assert texts[0] == texts[1]


def test_tables(tmp_path):
    h = tmp_path / "h.csv"
    h.write_text("s,value\n" + "".join(f"{0.01 * k},{1 / (1 - 0.01 * k)}\n" for k in range(100)))
    f = tmp_path / "f.csv"
    f.write_text("s,value\n-1,1\n1,1\n")
    code, out, _ = run(["solve", "--h-table", str(h), "--sigma", "1", "--f-table", str(f),
                        "--lambda", "3", "--m", "201"])
    assert code == 0
    bad = tmp_path / "bad.csv"
    bad.write_text("0,1\n0.5,2\n0.4,3\n")
    assert run(["transform", "--h-table", str(bad), "--sigma", "1"])[0] == 2
