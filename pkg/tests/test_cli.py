import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from sparsecoop import experiment
from sparsecoop.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main

TINY = str(Path(__file__).parent / "fixtures" / "tiny.yaml")
OUTPUTS = ("metrics.csv", "cpm_sizes.csv", "connectivity.json")


@pytest.fixture(scope="module")
def sweep_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    assert main(["run", "--scenario", TINY, "--sweep", "epsilon=0:1:0.2", "--out", str(out)]) == EXIT_OK
    return out


def _rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_epsilon_sweep_gives_six_rows_per_metric(sweep_run):
    rows = _rows(sweep_run / "metrics.csv")
    per_key = {}
    for r in rows:
        per_key.setdefault((r["variant"], r["iou_thr"], r["metric"]), []).append(float(r["epsilon"]))
    assert per_key and all(v == [0.0, 0.2, 0.4, 0.6, 0.8, 1.0] for v in per_key.values())


def test_artifacts_and_manifest(sweep_run):
    for name in OUTPUTS + ("run_manifest.json",):
        assert (sweep_run / name).is_file()
    man = json.loads((sweep_run / "run_manifest.json").read_text())
    assert man["seed"] == 3 and len(man["sweep"]) == 6
    assert set(OUTPUTS) <= set(man["outputs"])
    sizes = _rows(sweep_run / "cpm_sizes.csv")
    assert sizes and all(r["within_limit"] == "1" for r in sizes)
    conn = json.loads((sweep_run / "connectivity.json").read_text())
    assert conn["frames"] and "cec" in conn["summary"]


def test_same_command_twice_is_byte_identical(tmp_path):
    args = ["run", "--scenario", TINY, "--epsilon", "0.0"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    for name in OUTPUTS + ("run_manifest.json",):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = _rows(tmp_path / "a" / "metrics.csv")
    assert {r["epsilon"] for r in rows} == {"0.0000"}


def test_inspect_cpm(sweep_run, capsys):
    msg = next((sweep_run / "cpm").glob("*.cpm"))
    assert main(["inspect-cpm", "--file", str(msg), "--hex"]) == EXIT_OK
    out = capsys.readouterr().out
    info = json.loads(out[: out.index("}") + 1])
    assert info["size_bytes"] == msg.stat().st_size
    assert "00000000  43 50 4d 31" in out


def test_inspect_corrupt_cpm_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.cpm"
    bad.write_bytes(b"CPM1\x01\x00")
    assert main(["inspect-cpm", "--file", str(bad)]) == EXIT_RUNTIME
    assert "offset 6" in capsys.readouterr().err


def test_config_error_exit_code(tmp_path, capsys):
    cfg = tmp_path / "broken.yaml"
    cfg.write_text("seed: 1\ngenerator:\n  n_vehicles: lots\n")
    assert main(["run", "--scenario", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "broken.yaml:3" in err and "generator.n_vehicles" in err
    assert not (tmp_path / "o" / "metrics.csv").exists()
    assert main(["run", "--scenario", TINY, "--sweep", "speed=1", "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_failed_write_leaves_no_metrics(tmp_path, monkeypatch):
    def boom(_):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(experiment, "encode_cpm", boom)
    assert main(["run", "--scenario", TINY, "--epsilon", "0", "--out", str(tmp_path)]) == EXIT_RUNTIME
    assert not (tmp_path / "metrics.csv").exists()


def test_grid_report(capsys):
    assert main(["grid-report", "--scenario", TINY, "--frames", "0"]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    assert [f["frame"] for f in rep["frames"]] == [0]
    f0 = rep["frames"][0]
    assert f0["cec"]["center_coverage"] >= f0["standard"]["center_coverage"]
    assert main(["grid-report", "--scenario", TINY, "--agent", "9"]) == EXIT_CONFIG


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "sparsecoop.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("run", "sweep", "inspect-cpm", "grid-report"):
        assert cmd in res.stdout
