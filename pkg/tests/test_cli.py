import shutil
from pathlib import Path

import pytest

from confdeform import io
from confdeform.cli import EXIT_FAIL, EXIT_PASS, EXIT_USAGE, main

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"


def scenario(tmp_path, name, edit=None):
    text = (SCENARIOS / name).read_text()
    if edit:
        text = edit(text)
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_eigen_scenario_passes(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["eigen", "--scenario", scenario(tmp_path, "interval_sigma.ini"), "--out", str(out)]) == EXIT_PASS
    recs = io.read_records(out / "report.txt")
    assert any(r.get("kind") == "verdict" and r["pass"] for r in recs)
    assert "PASS overall" in capsys.readouterr().out


def test_wrong_expectation_fails(tmp_path):
    path = scenario(tmp_path, "interval_sigma.ini", lambda t: t.replace("expect = 0.76", "expect = 0.86"))
    assert main(["eigen", "--scenario", path, "--out", str(tmp_path / "o")]) == EXIT_FAIL


def test_fixed_point_then_verify_and_report(tmp_path, capsys):
    path = scenario(tmp_path, "prescribe_fixed_point.ini")
    out = str(tmp_path / "out")
    assert main(["prescribe", "--scenario", path, "--out", out]) == EXIT_PASS
    assert list(Path(out).glob("*.csv"))
    capsys.readouterr()
    assert main(["verify", "--scenario", path, "--out", out]) == EXIT_PASS
    assert "PASS reproduced" in capsys.readouterr().out
    assert main(["report", "--out", out]) == EXIT_PASS


def test_command_must_match_pipeline(tmp_path):
    assert main(["deform", "--scenario", scenario(tmp_path, "interval_sigma.ini"),
                 "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_missing_model_field(tmp_path, capsys):
    path = scenario(tmp_path, "interval_sigma.ini", lambda t: t.replace("name = flat_slab\n", ""))
    assert main(["eigen", "--scenario", path, "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert "model.name" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["eigen"],
    ["nonsense", "--scenario", "x.ini"],
    ["eigen", "--scenario", "x.ini", "--jobs", "0"],
    ["report", "--out", "/nonexistent/dir"],
])
def test_usage_errors(argv):
    assert main(argv) == EXIT_USAGE


def test_empty_sweep_grid(tmp_path):
    path = scenario(tmp_path, "refinement_sweep.ini", lambda t: t.replace("values = 16 | 32 | 64", "values = "))
    assert main(["sweep", "--scenario", path, "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_sweep_writes_table_and_order(tmp_path):
    path = scenario(tmp_path, "refinement_sweep.ini")
    out = tmp_path / "o"
    assert main(["sweep", "--scenario", path, "--out", str(out)]) == EXIT_PASS
    rows = (out / "sweep.csv").read_text().splitlines()
    assert rows[0].startswith("index,model.resolution,value,pass,error,order")
    assert len(rows) == 4 and (out / "point002" / "report.txt").exists()
    order = float(rows[3].split(",")[-1])
    assert abs(order - 2) < 0.05


def test_console_script_installed():
    assert shutil.which("confdeform") is not None
