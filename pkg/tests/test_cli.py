import json
import os
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from tropic_twin import cli, surrogate
from tropic_twin.errors import TrainingError

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert cli.main(["simulate", "--out", str(out), "--seed", "0"]) == 0
    return out


def test_simulate_writes_a_week(sim_dir):
    lines = (sim_dir / "trace.csv").read_text().splitlines()
    assert len(lines) == 1 + 672
    flags = [ln.rsplit(",", 1)[1] for ln in lines[1:]]
    assert set(flags) == {"0"}


def test_simulate_is_byte_deterministic(sim_dir, tmp_path):
    assert cli.main(["simulate", "--out", str(tmp_path), "--seed", "0"]) == 0
    assert (tmp_path / "trace.csv").read_bytes() == (sim_dir / "trace.csv").read_bytes()


def test_scenario_file_matches_builtin(sim_dir, tmp_path):
    scenario = ROOT / "scenarios" / "case_study.txt"
    assert cli.main(["simulate", "--out", str(tmp_path), "--scenario", str(scenario)]) == 0
    assert (tmp_path / "trace.csv").read_bytes() == (sim_dir / "trace.csv").read_bytes()


def test_manifest_lists_verified_artifacts(sim_dir):
    manifest = json.loads((sim_dir / "manifest.json").read_text())
    assert manifest["stages"] == ["simulate"]
    assert manifest["artifacts"]["trace"]["path"] == "trace.csv"
    assert cli.verify_manifest(sim_dir) == []


def test_manifest_detects_tampering(tmp_path):
    assert cli.main(["simulate", "--out", str(tmp_path), "--days", "1"]) == 0
    with open(tmp_path / "trace.csv", "a") as f:
        f.write("\n")
    assert cli.verify_manifest(tmp_path) == ["trace"]


def test_train_needs_seven_days(tmp_path, capsys):
    assert cli.main(["simulate", "--out", str(tmp_path), "--days", "6"]) == 0
    code = cli.main(["train", "--out", str(tmp_path), "--trace", str(tmp_path / "trace.csv"), "--mode", "data"])
    assert code == 1
    assert "at least 7 days" in capsys.readouterr().err


def test_piml_rejects_non_positive_lambda(sim_dir, tmp_path):
    args = ["train", "--out", str(tmp_path), "--trace", str(sim_dir / "trace.csv"), "--lambda-p", "0"]
    assert cli.main(args) == 1


def test_numeric_failure_exits_2(sim_dir, tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise TrainingError("non-finite loss at epoch 0")

    monkeypatch.setattr(surrogate, "train_data_driven", boom)
    args = ["train", "--out", str(tmp_path), "--trace", str(sim_dir / "trace.csv"), "--mode", "data"]
    assert cli.main(args) == 2
    assert "numeric failure" in capsys.readouterr().err


def test_calibrate_unknown_parameter_lists_valid_names(sim_dir, tmp_path, capsys):
    args = ["calibrate", "--out", str(tmp_path), "--trace", str(sim_dir / "trace.csv"), "--free-params", "foo"]
    assert cli.main(args) == 1
    err = capsys.readouterr().err
    assert "'foo'" in err and "coil_ua" in err and "zone_heat_capacity" in err


def test_calibrate_empty_parameter_list(sim_dir, tmp_path):
    args = ["calibrate", "--out", str(tmp_path), "--trace", str(sim_dir / "trace.csv"), "--free-params", ""]
    assert cli.main(args) == 1


def test_calibrate_writes_result_file(sim_dir, tmp_path):
    args = ["calibrate", "--out", str(tmp_path), "--trace", str(sim_dir / "trace.csv"),
            "--free-params", "fan_cubic_coeff", "--days", "1"]
    assert cli.main(args) == 0
    lines = (tmp_path / "calibration.csv").read_text().splitlines()
    assert lines[0] == "param,init,recovered,truth_if_known,rel_err,sensitivity"
    assert lines[1].startswith("fan_cubic_coeff,10.27,")
    assert float(lines[1].split(",")[4]) < 0.02


def test_missing_model_names_the_file(tmp_path, capsys):
    assert cli.main(["optimize", "--out", str(tmp_path), "--method", "multipi", "--days", "1"]) == 1
    assert "model_piml.txt" in capsys.readouterr().err


def test_optimize_and_report(tmp_path):
    out = str(tmp_path)
    assert cli.main(["optimize", "--out", out, "--method", "fixed", "--days", "1"]) == 0
    rep = json.loads((tmp_path / "report_fixed.json").read_text())
    assert rep["normalized_power"] == 1.0 and "sla_violation_count" in rep
    assert cli.main(["optimize", "--out", out, "--method", "cem", "--days", "1"]) == 0
    search = (tmp_path / "search_cem.csv").read_text().splitlines()
    assert search[0] == "generation,member,violating_periods" and len(search) > 100
    assert cli.main(["report", "--out", out]) == 0
    first = (tmp_path / "comparison.csv").read_bytes()
    rows = first.decode().splitlines()
    assert rows[0].split(",")[:4] == ["method", "label", "mean_cooling_power", "normalized_power"]
    assert [r.split(",")[0] for r in rows[1:]] == ["fixed", "cem"]
    assert cli.main(["report", "--out", out]) == 0
    assert (tmp_path / "comparison.csv").read_bytes() == first
    assert cli.verify_manifest(tmp_path) == []


def test_report_without_inputs_fails(tmp_path):
    assert cli.main(["report", "--out", str(tmp_path)]) == 1


@pytest.mark.parametrize(
    "argv",
    [[], ["simulate"], ["optimize", "--out", "x", "--method", "sac"], ["train", "--out", "x"], ["frobnicate"]],
)
def test_usage_errors_exit_1(argv):
    with pytest.raises(SystemExit) as exc:
        cli.main(argv)
    assert exc.value.code == 1


@pytest.mark.parametrize("value,code", [("abc", 1), ("0", 1), ("-2", 1), ("1", 0)])
def test_thread_cap_validation(tmp_path, monkeypatch, value, code):
    monkeypatch.setenv("TROPIC_TWIN_THREADS", value)
    assert cli.main(["simulate", "--out", str(tmp_path), "--days", "1"]) == code


def test_console_script_runs(tmp_path):
    exe = shutil.which("tropic-twin")
    cmd = [exe] if exe else [sys.executable, "-m", "tropic_twin"]
    res = subprocess.run(cmd + ["simulate", "--out", str(tmp_path), "--days", "1"],
                         capture_output=True, text=True, env=dict(os.environ))
    assert res.returncode == 0, res.stderr
    assert "trace:" in res.stdout
