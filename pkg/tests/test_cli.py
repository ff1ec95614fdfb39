import json
import subprocess
import sys

import pytest

from game_lab.cli import main


def run_cli(*args):
    return main([str(a) for a in args])


def test_validate_ok_and_invalid(tmp_path, capsys):
    assert run_cli("validate", "--output", tmp_path) == 0
    assert "valid" in capsys.readouterr().out
    assert run_cli("validate", "--output", tmp_path, "q=5") == 1
    assert run_cli("validate", "--output", tmp_path, "sigma=0") == 1
    assert run_cli("validate", "--output", tmp_path, "nonsense") == 1


def test_unknown_flag_exits_one(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run_cli("riccati", "--bogus")
    assert exc.value.code == 1


def test_io_error_exit_three(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run_cli("riccati", "--output", blocker / "sub") == 3


def test_params_file_and_metadata(tmp_path):
    cfg = tmp_path / "p.cfg"
    cfg.write_text("n_players = 4\nhorizon = 1.0\ndelay = 0.25\n")
    out = tmp_path / "out"
    assert run_cli("kernels", "--params", cfg, "--output", out, "--dt", 0.004, "c=0.5") == 0
    meta = json.loads((out / "run.json").read_text())
    assert meta["params"]["n_players"] == 4 and meta["params"]["c"] == 0.5
    assert meta["dt_requested"] == 0.004 and meta["dt_used"] <= 0.004
    assert set(meta["artifacts"]) == {"kernels.csv", "kernels.bin"}
    assert (out / "kernels.csv").read_text().startswith("t,E0,E1_at_0,liquidity\n")


def test_json_mirrors_csv(tmp_path):
    assert run_cli("riccati", "--output", tmp_path / "a", "--dt", 0.1) == 0
    assert run_cli("riccati", "--output", tmp_path / "b", "--dt", 0.1, "--format", "json") == 0
    rows = (tmp_path / "a" / "riccati.csv").read_text().splitlines()
    data = json.loads((tmp_path / "b" / "riccati.json").read_text())
    assert data["schema_version"] == 1
    assert data["columns"] == rows[0].split(",")
    assert len(data["rows"]) == len(rows) - 1
    assert data["rows"][3][1] == float(rows[4].split(",")[1])


def test_rerun_is_byte_identical(tmp_path):
    a = tmp_path / "a"
    assert run_cli("simulate", "--output", a, "--n-paths", 300, "--seed", 9,
                   "--tau-sweep", "0,0.25", "n_players=4") == 0
    assert run_cli("rerun", a / "manifest.json", "--output", tmp_path / "b") == 0
    first = (a / "simulate.csv").read_bytes()
    assert first == (tmp_path / "b" / "simulate.csv").read_bytes()
    assert len(first.decode().splitlines()) == 3


def test_liquidity_and_nashgap(tmp_path):
    assert run_cli("liquidity", "--output", tmp_path, "--tau-sweep", "0,0.25,0.5") == 0
    lines = (tmp_path / "liquidity.csv").read_text().splitlines()
    assert lines[0] == "tau,t,liquidity,liquidity0_increasing"
    assert run_cli("nashgap", "--output", tmp_path, "--n-paths", 200, "--dt", 0.01,
                   "n_players=3") == 0
    assert len((tmp_path / "nashgap.csv").read_text().splitlines()) == 4


def test_systemic_and_fabsde(tmp_path):
    assert run_cli("systemic", "--output", tmp_path, "--n-paths", 2000, "--dt", 0.01) == 0
    header, row = (tmp_path / "systemic.csv").read_text().splitlines()
    assert header == "D,tau,dt,n_paths,closed_form,mc_estimate,mc_se,z_score"
    assert row.startswith("-0.7,")
    assert run_cli("fabsde", "--output", tmp_path, "--n-paths", 1000, "--dt", 0.05,
                   "n_players=3", "initial_reserves=-1,0,1") == 0
    assert (tmp_path / "fabsde_residuals.csv").exists()


def test_bad_rerun_manifest(tmp_path):
    bad = tmp_path / "m.json"
    bad.write_text("{not json")
    assert run_cli("rerun", bad) == 1
    assert run_cli("rerun", tmp_path / "missing.json") == 3


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "game_lab", "validate", "--output", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == "valid"
