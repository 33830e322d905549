import json
import shutil
import subprocess

import pytest

from gridreg.cli import main
from gridreg.grid import save_scenario, scenario_from_dict

from conftest import three_bus_doc


@pytest.fixture
def scenario_file(tmp_path):
    p = tmp_path / "three.json"
    save_scenario(scenario_from_dict(three_bus_doc()), p)
    return str(p)


def test_validate_shipped(capsys):
    assert main(["validate", "--scenario", "ieee68"]) == 0
    out = capsys.readouterr().out
    assert "PASS passive_damping_dominance" in out


def test_validate_failure_exit_code(tmp_path, capsys):
    doc = three_bus_doc()
    doc["buses"][2]["params"]["D"] = 1.0
    p = tmp_path / "weak.json"
    save_scenario(scenario_from_dict(doc), p)
    assert main(["validate", "--scenario", str(p)]) == 2
    assert "FAIL passive_damping_dominance" in capsys.readouterr().out
    assert main(["run", "--scenario", str(p), "--t-end", "1"]) == 2


def test_missing_scenario(capsys):
    assert main(["run", "--scenario", "no_such_grid"]) == 2
    assert "not found" in capsys.readouterr().err


def test_run_writes_csv(scenario_file, tmp_path, capsys):
    out = tmp_path / "run.csv"
    code = main(["run", "--scenario", scenario_file, "--t-end", "1", "--dt", "0.01", "--decimate", "10",
                 "--out", str(out)])
    assert code == 0
    assert len(out.read_text().splitlines()) == 12
    assert "final max |w - w*|" in capsys.readouterr().out


def test_integration_failure_exit_code(scenario_file, capsys):
    assert main(["run", "--scenario", scenario_file, "--dt", "0.5", "--t-end", "2000"]) == 3
    assert "integration failure at t=" in capsys.readouterr().err


def test_compare_writes_both_runs(scenario_file, tmp_path, capsys):
    out = tmp_path / "cmp.csv"
    code = main(["compare", "--scenario", scenario_file, "--t-end", "110", "--dt", "0.01", "--decimate", "50",
                 "--out", str(out)])
    assert code == 0
    assert (tmp_path / "cmp_robust.csv").exists() and (tmp_path / "cmp_baseline.csv").exists()
    assert "ratio" in capsys.readouterr().out


def test_check_gains_robust(scenario_file, capsys):
    assert main(["check-gains", "--scenario", scenario_file, "--solution", "robust"]) == 0
    out = capsys.readouterr().out
    assert "max Re eig(A)" in out and out.strip().endswith("PASS")


def test_check_gains_adaptive_prints_bounds(scenario_file, capsys):
    assert main(["check-gains", "--scenario", scenario_file, "--solution", "adaptive"]) == 0
    out = capsys.readouterr().out
    for key in ("B(M)=", "alpha=", "gamma:", "max eig(A + A^T)"):
        assert key in out


def test_check_gains_refuses_baseline(scenario_file):
    assert main(["check-gains", "--scenario", scenario_file, "--solution", "baseline"]) == 2


def test_certify_json(scenario_file, tmp_path, capsys):
    out = tmp_path / "cert.json"
    assert main(["certify", "--scenario", scenario_file, "--design", "algorithm", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc == json.loads(capsys.readouterr().out)
    assert doc["hurwitz"]["passed"] and doc["small_gain"]["contraction"]
    assert doc["small_gain"]["beta"]["L"] == 2.0


@pytest.mark.skipif(shutil.which("gridreg") is None, reason="console script not installed")
def test_console_script():
    r = subprocess.run(["gridreg", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("run", "compare", "check-gains", "certify", "validate"):
        assert cmd in r.stdout
