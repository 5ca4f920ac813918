import json
import subprocess
import sys

import numpy as np
import pytest

from stratlie import builtin_group, group_to_spec
from stratlie.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_check_builtin(capsys):
    code, out, _ = run(capsys, "check", "--builtin", "n32_glued:2")
    doc = json.loads(out)
    assert code == 0
    assert doc["dbar1"] == 4 and doc["pCritical"] == "10/9"
    assert doc["assumptionA"]["holds"] and doc["assumptionB"]["holds"]


def test_check_counterexample_exits_2(capsys):
    code, out, _ = run(capsys, "check", "--builtin", "shared_center_reiter")
    assert code == 2
    assert not json.loads(out)["assumptionB"]["holds"]


def test_check_group_file(tmp_path, capsys):
    f = tmp_path / "g.json"
    f.write_text(group_to_spec(builtin_group("heisenberg_reiter", 1, 2)))
    code, out, _ = run(capsys, "check", "--group", str(f), "--format", "text")
    assert code == 0 and "pCritical" in out
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert run(capsys, "check", "--group", str(bad))[0] == 1


def test_usage_errors(capsys):
    assert run(capsys, "check", "--builtin", "nope:1")[0] == 1
    assert run(capsys, "bogus")[0] == 1
    assert run(capsys, "decompose", "--builtin", "heisenberg:1", "--mu", "0")[0] == 1
    assert run(capsys, "exponent", "--dbar", "1", "--d2", "3")[0] == 1
    assert run(capsys, "verify", "plancherel", "--bump", "2,1")[0] == 1


def test_exponent_and_decompose(capsys):
    code, out, _ = run(capsys, "exponent", "--dbar", "2", "--d2", "3")
    assert code == 0 and json.loads(out)["pCritical"] == "1"
    code, out, _ = run(capsys, "decompose", "--builtin", "heisenberg_reiter:1,2", "--mu", "1,0")
    doc = json.loads(out)
    assert code == 0 and doc["r0"] == 1
    assert np.allclose(doc["b"], [1.0])


def test_classify(capsys):
    code, out, _ = run(capsys, "classify", "--builtin", "heisenberg:2")
    doc = json.loads(out)
    assert code == 0
    assert doc["isMetivier"] and doc["isHeisenbergType"] and doc["r0"] == 0


def test_kernel_writes_csv_and_sidecars(tmp_path, capsys):
    out = tmp_path / "k.csv"
    code, _, _ = run(capsys, "kernel", "--builtin", "heisenberg:1", "--grid", "2,5,3,7",
                     "--out", str(out))
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "x1,x2,u1,re,im" and len(lines) == 1 + 5 * 5 * 7
    meta = json.loads((tmp_path / "k.csv.json").read_text())
    assert "timing" not in meta
    assert json.loads((tmp_path / "k.csv.timing.json").read_text())["seconds"] >= 0


def test_verify_report_roundtrip(tmp_path, capsys):
    out = tmp_path / "rep.json"
    code, _, _ = run(capsys, "verify", "plancherel", "--out", str(out))
    assert code == 0
    doc = json.loads(out.read_text())
    assert doc["verdict"] == "pass" and "runtime" not in doc
    assert (tmp_path / "rep.json.timing.json").exists()
    code, text, _ = run(capsys, "report", str(out), "--format", "text")
    assert code == 0 and "plancherel-crosscheck: PASS" in text


def test_verify_refusal_exit_code(capsys):
    code, out, _ = run(capsys, "verify", "localization", "--layer", "second",
                       "--builtin", "shared_center_reiter", "--C", "1")
    assert code == 2
    assert json.loads(out)["verdict"] == "refused"


def test_verify_csv_and_text(capsys):
    code, out, _ = run(capsys, "verify", "sobolev", "--format", "csv")
    assert out.splitlines()[0] == "parameter,measured,reference,verdict"
    code, out, _ = run(capsys, "verify", "sobolev", "--format", "text")
    assert out.startswith("sobolev-embedding:")


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "stratlie", "exponent", "--dbar", "4", "--d2", "3"],
                       capture_output=True, text=True, check=False)
    assert r.returncode == 0
    assert json.loads(r.stdout)["pCritical"] == "10/9"
