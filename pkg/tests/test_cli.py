import csv
import json
import shutil
import subprocess
import sys

import pytest

from planar_cohomology.cli import atomic_write, main
from planar_cohomology.registry import registry


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_diagnose_smooth_pullback_exits_zero(capsys):
    code, out, _ = run(capsys, "diagnose", "--model", "ex51:1", "--g", "2*y/(1+y^2)", "--kmax", "2")
    doc = json.loads(out)
    assert code == 0
    assert doc["schema"] == 1 and doc["order"] >= 2 and doc["verdict"].startswith("solvable to order")


def test_diagnose_constant_exits_three(capsys):
    code, out, _ = run(capsys, "diagnose", "--model", "ex51:1", "--g", "1", "--kmax", "0")
    doc = json.loads(out)
    assert code == 3
    assert doc["divergent"] == [{"pair": 0, "order": 0}]


def test_positional_rhs(capsys):
    code, out, _ = run(capsys, "gap", "x*y", "--model", "ex51:1")
    assert code == 0 and json.loads(out)["outcome"] == "finite"


def test_solve_writes_csv(tmp_path, capsys):
    out = tmp_path / "f.csv"
    code, summary, _ = run(capsys, "solve", "--model", "ex52:1", "--g", "2*x", "--grid", "81", "81", "--out", str(out))
    assert code == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["x", "y", "f", "residual"]
    assert len(rows) == 81 * 81
    assert max(float(r["residual"]) for r in rows) <= 1e-5
    assert json.loads(summary)["csv"] == str(out)
    assert [p.name for p in tmp_path.iterdir()] == ["f.csv"]


def test_solve_with_divergent_gap_exits_three(tmp_path, capsys):
    out = tmp_path / "f.csv"
    code, _, err = run(capsys, "solve", "--g", "exp(-x)/(1+y^2)", "--operator", "xi'", "--grid", "9", "9",
                       "--out", str(out))
    assert code == 3 and "pair 0" in err
    assert not out.exists()


@pytest.mark.parametrize("argv", [
    ["diagnose", "--g", "1 + * 2"],
    ["diagnose", "--model", "ex51:6", "--g", "x"],
    ["diagnose", "--model", "nope", "--g", "x"],
    ["diagnose"],
    ["order", "--model", "const", "--ghat", "x"],
    ["trace", "--model", "ex51:1", "--point", "5", "0", "--box", "-1", "1", "-2", "2"],
])
def test_validation_errors_exit_two(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 2 and err.startswith("error:")


def test_bad_spec_file_exits_two(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{")
    code, _, _ = run(capsys, "show", "--spec", str(p))
    assert code == 2


def test_spec_file_round_trip(tmp_path, capsys):
    d = registry("ex52:1").to_json()
    d.pop("model")
    p = tmp_path / "s.json"
    p.write_text(json.dumps(d))
    code, out, _ = run(capsys, "gap", "--spec", str(p), "--g", "x*cos(y)", "--pair", "2")
    assert code == 0 and json.loads(out)["s1"] == "s-1"


def test_verify_report(capsys):
    code, out, _ = run(capsys, "verify", "--model", "ex52:1", "--samples", "2000")
    rep = json.loads(out)
    assert code == 0 and rep["samples"] == 2000 and all(rep["passed"].values())


def test_order_command(capsys):
    code, out, _ = run(capsys, "order", "--model", "ex51:1", "--ghat", "x/sqrt(x^2+y^2)", "--rmax", "2")
    assert code == 0 and json.loads(out)["order"] == 0
    code, out, _ = run(capsys, "order", "--model", "ex51:1", "--ghat", "1/x^2 + 1/y^2", "--rmax", "1")
    assert code == 3 and json.loads(out)["order"] == -1


def test_trace_csv(capsys):
    code, out, _ = run(capsys, "trace", "--model", "ex51:1", "--point", "0", "0", "--length", "5")
    lines = out.splitlines()
    assert code == 0 and lines[0] == "t,x,y" and len(lines) > 50


@pytest.mark.parametrize("model", ["ex51:1", "ex52:1"])
def test_positivity_command(capsys, model):
    code, out, _ = run(capsys, "positivity", "--model", model, "--depth", "8", "--points", "300")
    doc = json.loads(out)
    assert code == 0 and doc["positive"] and doc["covered"] > 0


def test_seed_makes_sampling_deterministic(tmp_path, capsys):
    outs = []
    for i in range(2):
        p = tmp_path / f"v{i}.json"
        run(capsys, "verify", "--model", "ex51:1", "--samples", "500", "--seed", "7", "--out", str(p))
        outs.append(p.read_text())
    assert outs[0] == outs[1]
    p = tmp_path / "other.json"
    run(capsys, "verify", "--model", "ex51:1", "--samples", "500", "--seed", "8", "--out", str(p))
    assert json.loads(p.read_text())["relations"] != json.loads(outs[0])["relations"]


def test_atomic_write_leaves_no_temporary_on_failure(tmp_path, monkeypatch):
    target = tmp_path / "x.json"
    target.write_text("old")

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr("os.replace", boom)
    with pytest.raises(OSError):
        atomic_write(target, "new")
    assert target.read_text() == "old"
    assert [p.name for p in tmp_path.iterdir()] == ["x.json"]


def test_console_script_is_installed():
    exe = shutil.which("planar-cohomology")
    cmd = [exe] if exe else [sys.executable, "-m", "planar_cohomology.cli"]
    r = subprocess.run(cmd + ["show", "--model", "ex51:2"], capture_output=True, text=True, timeout=120)
    assert r.returncode == 0
    assert json.loads(r.stdout)["hamiltonian"]["degenerate"] == ["y+1"]
