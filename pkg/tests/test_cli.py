import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from msf_bench.cli import EXIT_DATAERR, EXIT_NOINPUT, EXIT_OK, EXIT_PARTIAL, EXIT_USAGE, run
from msf_bench.dataset_io import DepthMap, load_calibration, write_depth_map
from msf_bench.report import RunResult
from synthetic import tree_bytes, write_detection_dataset


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    return write_detection_dataset(tmp_path_factory.mktemp("kitti"), n_frames=2, h=48, w=160, n_points=1500)


def corrupt(dataset, out, *extra):
    return run(["corrupt", "--in", str(dataset), "--out", str(out), "--jobs", "1", *extra])


# -- corrupt ------------------------------------------------------------------


def test_corrupt_fog_dataset(dataset, tmp_path, capsys):
    assert corrupt(dataset, tmp_path / "o", "--pattern", "FG", "--severity", "3", "--seed", "42") == EXIT_OK
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["parameters"]["visibility"] == 51
    assert manifest["seed"] == 42
    assert str(tmp_path / "o" / "manifest.json") in capsys.readouterr().out


def test_rerun_is_bitwise_identical(dataset, tmp_path):
    args = ("--pattern", "RN", "--severity", "2", "--seed", "5")
    assert corrupt(dataset, tmp_path / "a", *args) == EXIT_OK
    assert corrupt(dataset, tmp_path / "b", *args) == EXIT_OK
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_unknown_pattern_lists_choices(dataset, tmp_path, capsys):
    assert corrupt(dataset, tmp_path / "o", "--pattern", "SNOW", "--severity", "1") == EXIT_USAGE
    err = capsys.readouterr().err
    assert "SNOW" in err and "GN_C" in err and "LOSS_L" in err


def test_bad_severity_is_usage_error(dataset, tmp_path):
    assert corrupt(dataset, tmp_path / "o", "--pattern", "RN", "--severity", "4") == EXIT_USAGE


def test_missing_required_flag():
    with pytest.raises(SystemExit) as exc:
        run(["corrupt", "--pattern", "RN"])
    assert exc.value.code == EXIT_USAGE


def test_missing_input_directory(tmp_path):
    assert corrupt(tmp_path / "nope", tmp_path / "o", "--pattern", "BR", "--severity", "1") == EXIT_NOINPUT


def test_param_override(dataset, tmp_path):
    assert corrupt(dataset, tmp_path / "o", "--pattern", "SM", "--severity", "1", "--param", "axis=x") == EXIT_OK
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["parameters"]["axis"] == "x"
    load_calibration(tmp_path / "o" / "calib" / "000000.txt")


def test_malformed_param(dataset, tmp_path):
    assert corrupt(dataset, tmp_path / "o", "--pattern", "RN", "--severity", "1", "--param", "rate") == EXIT_USAGE


def test_partial_failure_exit_code(dataset, tmp_path):
    broken = tmp_path / "broken"
    shutil.copytree(dataset, broken)
    (broken / "velodyne" / "000001.bin").write_bytes(b"\1" * 5)
    assert corrupt(broken, tmp_path / "o", "--pattern", "GN_L", "--severity", "1") == EXIT_PARTIAL
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["failed"] == ["1"]


def test_bad_config_env(dataset, tmp_path, monkeypatch):
    monkeypatch.setenv("MSF_BENCH_CONFIG", str(tmp_path / "missing.ini"))
    assert corrupt(dataset, tmp_path / "o", "--pattern", "RN", "--severity", "1") == EXIT_USAGE


# -- evaluate -----------------------------------------------------------------


def test_evaluate_detection_perfect(dataset, tmp_path, capsys):
    pred = tmp_path / "pred"
    pred.mkdir()
    for p in (dataset / "label_2").glob("*.txt"):
        rows = [line + " 1.0" for line in p.read_text().splitlines() if line.strip()]
        (pred / p.name).write_text("\n".join(rows) + "\n")
    out = tmp_path / "clean.json"
    code = run(["evaluate", "--task", "detection", "--gt", str(dataset / "label_2"), "--pred", str(pred),
                "--out", str(out)])  # fmt: skip
    assert code == EXIT_OK
    assert "AP 1.000000" in capsys.readouterr().out
    result = json.loads(out.read_text())
    assert result["metric_value"] == 1.0 and result["pattern"] == "clean"


def test_evaluate_detection_empty_predictions(dataset, tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    code = run(["evaluate", "--task", "detection", "--gt", str(dataset / "label_2"), "--pred", str(empty),
                "--out", str(tmp_path / "r.json")])  # fmt: skip
    assert code == EXIT_OK
    assert "AP 0.000000" in capsys.readouterr().out


def test_evaluate_depth_identical(tmp_path, capsys, rng):
    gt = tmp_path / "gt"
    for i in range(2):
        write_depth_map(DepthMap(rng.integers(0, 20000, (20, 30), dtype=np.uint16)), gt / f"{i:06d}.png")
    code = run(["evaluate", "--task", "depth", "--gt", str(gt), "--pred", str(gt), "--out", str(tmp_path / "r.json")])
    assert code == EXIT_OK
    assert "RMSE 0.000000" in capsys.readouterr().out


def test_evaluate_tracking(tmp_path, capsys):
    rows = ["0 1 Car 0 0 0 10 10 50 50 1.5 1.6 3.9 0 1.7 20 0", "1 1 Car 0 0 0 12 10 52 50 1.5 1.6 3.9 0 1.7 20 0"]
    gt = tmp_path / "0000.txt"
    gt.write_text("\n".join(rows) + "\n")
    code = run(["evaluate", "--task", "tracking", "--gt", str(gt), "--pred", str(gt), "--out", str(tmp_path / "r.json")])
    assert code == EXIT_OK
    assert "MOTA 1.000000" in capsys.readouterr().out


def test_evaluate_malformed_prediction(dataset, tmp_path, caplog):
    pred = tmp_path / "pred"
    pred.mkdir()
    (pred / "000000.txt").write_text("Car 1 2 3\n")
    code = run(["evaluate", "--task", "detection", "--gt", str(dataset / "label_2"), "--pred", str(pred),
                "--out", str(tmp_path / "r.json")])  # fmt: skip
    assert code == EXIT_DATAERR
    assert "000000.txt" in caplog.text


def test_evaluate_missing_gt(tmp_path):
    code = run(["evaluate", "--task", "detection", "--gt", str(tmp_path / "x"), "--pred", str(tmp_path)])
    assert code == EXIT_NOINPUT


def test_evaluate_corrupted_needs_severity(dataset, tmp_path):
    code = run(["evaluate", "--task", "detection", "--gt", str(dataset / "label_2"), "--pred", str(tmp_path),
                "--pattern", "RN"])  # fmt: skip
    assert code == EXIT_USAGE


# -- report -------------------------------------------------------------------


def write_result(path, pattern, severity, value, task="detection"):
    path.write_text(RunResult(task, pattern, severity, value).to_json())
    return str(path)


def test_report_single_cell(tmp_path, capsys):
    clean = write_result(tmp_path / "clean.json", "clean", None, 82.70)
    rn = write_result(tmp_path / "rn.json", "RN", 1, 58.72)
    assert run(["report", rn, "--clean", clean, "--out", str(tmp_path / "rep")]) == EXIT_OK
    report = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert report["cells"][0]["rb"] == pytest.approx(0.71, abs=0.005)
    assert report["mrb"] == pytest.approx(0.71, abs=0.005)
    assert (tmp_path / "rep" / "report.csv").exists()
    assert "| RN |" in (tmp_path / "rep" / "report.md").read_text()


def test_report_uniform_results(tmp_path, capsys):
    clean = write_result(tmp_path / "clean.json", "clean", None, 50.0)
    files = [write_result(tmp_path / f"{p}{s}.json", p, s, 50.0) for p in ("RN", "FG") for s in (1, 2, 3)]
    assert run(["report", clean, *files]) == EXIT_OK
    row = capsys.readouterr().out.splitlines()[2]
    assert row.rstrip().endswith("| 1.00 |")


def test_report_without_clean(tmp_path):
    rn = write_result(tmp_path / "rn.json", "RN", 1, 58.72)
    assert run(["report", rn]) == EXIT_DATAERR


def test_report_missing_clean_file(tmp_path):
    rn = write_result(tmp_path / "rn.json", "RN", 1, 58.72)
    assert run(["report", rn, "--clean", str(tmp_path / "gone.json")]) == EXIT_DATAERR


def test_report_single_format_to_stdout(tmp_path, capsys):
    clean = write_result(tmp_path / "clean.json", "clean", None, 0.8, task="tracking")
    rn = write_result(tmp_path / "rn.json", "RN", 2, 0.4, task="tracking")
    assert run(["report", clean, rn, "--format", "csv"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.splitlines()[0].startswith("pattern,")
    assert "0.500000" in out


# -- entry point --------------------------------------------------------------


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "msf_bench.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "corrupt" in proc.stdout and "evaluate" in proc.stdout and "report" in proc.stdout


def test_data_error_reaches_stderr(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    proc = subprocess.run([sys.executable, "-m", "msf_bench.cli", "report", str(bad)], capture_output=True, text=True)
    assert proc.returncode == EXIT_DATAERR
    assert "bad.json" in proc.stderr


def test_no_subcommand_is_usage_error():
    proc = subprocess.run([sys.executable, "-m", "msf_bench.cli"], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE
