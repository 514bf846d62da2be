from __future__ import annotations

import subprocess
import sys

import pytest

from hdiv.cli import main
from hdiv.dgp import draw, make_params

from test_harness import write_draw_csv


def cfg_file(tmp_path, text="n = 120\np_x = 30\np_z = 10\n"):
    p = tmp_path / "study.cfg"
    p.write_text(text)
    return p


def test_simulate(tmp_path, capsys):
    rc = main(["simulate", "--config", str(cfg_file(tmp_path)), "--reps", "3", "--seed", "1",
               "--methods", "oracle,double-selection", "--out", str(tmp_path / "out"), "--dump-raw"])
    assert rc == 0
    names = sorted(p.name for p in (tmp_path / "out").iterdir())
    assert names == ["histogram_double-selection.csv", "histogram_oracle.csv", "raw.tsv", "run_manifest.txt",
                     "summary.tsv"]
    assert "double-selection" in capsys.readouterr().out


def test_simulate_config_errors(tmp_path):
    assert main(["simulate", "--config", str(cfg_file(tmp_path, "reps = x\n")), "--out", str(tmp_path)]) == 1
    assert main(["simulate", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == 1
    assert main(["simulate", "--methods", "magic", "--out", str(tmp_path)]) == 1


def test_analyze(tmp_path, capsys):
    s = draw(make_params(120, 30, 10), 8)
    roles = write_draw_csv(tmp_path / "d.csv", s)
    rfile = tmp_path / "roles.txt"
    rfile.write_text("".join(f"{k} = {v}\n" for k, v in roles.items()))
    rc = main(["analyze", "--csv", str(tmp_path / "d.csv"), "--roles", str(rfile), "--level", "0.9",
               "--out", str(tmp_path / "res")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "d: estimate" in out and "inversion" in out
    assert (tmp_path / "res" / "result.tsv").read_text().startswith("parameter\testimate")


def test_analyze_exit_codes(tmp_path):
    csvf = tmp_path / "d.csv"
    csvf.write_text("y,d,z\n")
    roles = tmp_path / "r.txt"
    roles.write_text("y = outcome\nd = endogenous\nz = instrument\n")
    assert main(["analyze", "--csv", str(csvf), "--roles", str(roles)]) == 2
    roles.write_text("y = outcome\nd = endogenous\nd = instrument\n")
    assert main(["analyze", "--csv", str(csvf), "--roles", str(roles)]) == 1
    roles.write_text("y = outcome\nd = endogenous\nz = instrument\n")
    assert main(["analyze", "--csv", str(csvf), "--roles", str(roles), "--level", "2"]) == 1


def test_check_kkt(capsys):
    assert main(["check", "--suite", "kkt"]) == 0
    assert capsys.readouterr().out.count("[PASS]") == 5


def test_check_ortho(capsys):
    assert main(["check", "--suite", "ortho"]) == 0


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "hdiv.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "simulate" in r.stdout


def test_unknown_suite_is_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["check", "--suite", "bogus"])
    assert e.value.code == 2


def test_null_suite_plumbing():
    from hdiv.checks import null_suite

    (res,) = null_suite(reps=15, seed=3)
    assert 0.0 <= res.value <= 1.0 and "15 replications" in res.name
