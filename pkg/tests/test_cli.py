import json

import pytest
import yaml
from click.testing import CliRunner

from vesselscreen.cli import main
from vesselscreen import traceio


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump({"seed": 5, "duration_s": 0.6, "initial_offset_deg": 15.0}))
    return path


def invoke(*args):
    result = CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)
    return result


def test_run_writes_outputs(small_config, tmp_path):
    out = tmp_path / "out"
    result = invoke("run", "--config", small_config, "--seed", 7, "--out", out, "--ply")
    assert result.exit_code == 0, result.output
    for name in ("trace.csv", "summary.csv", "metadata.json", "errors.png", "path.png", "buffer_raw.ply", "buffer_spread.ply"):
        assert (out / name).stat().st_size > 0, name
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["config"]["seed"] == 7 and meta["status"] == "ok"
    header, cols = traceio.read_trace(out / "trace.csv")
    assert header["K_m"] == "1000 1000 300 20 20 2"
    assert len(cols["t"]) == 60
    assert "e_or_rea_mean" in result.output


def test_replay_reproduces_summary(small_config, tmp_path):
    out = tmp_path / "out"
    invoke("run", "--config", small_config, "--out", out, "--no-plots")
    stored = traceio.read_table(out / "summary.csv")
    result = invoke("replay", "--trace", out / "trace.csv")
    assert result.exit_code == 0, result.output
    assert (out / "trace_errors.png").exists() and (out / "trace_path.png").exists()
    printed = dict(line.split() for line in result.output.strip().splitlines())
    (row,) = stored
    assert printed.pop("status") == row.pop("status") == "ok"
    # the trace keeps ten significant digits, so allow for that rounding
    for key, val in row.items():
        assert float(printed[key]) == pytest.approx(float(val), rel=1e-8, nan_ok=True), key


def test_batch_is_byte_identical(small_config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        result = invoke("batch", "--config", small_config, "--offsets", "0,45", "--repeats", 2, "--out", out)
        assert result.exit_code == 0, result.output
    assert (a / "batch.csv").read_bytes() == (b / "batch.csv").read_bytes()
    assert (a / "batch.png").exists()
    assert len(traceio.read_table(a / "batch.csv")) == 6


def test_lost_target_exit_code(tmp_path):
    path = tmp_path / "lost.yaml"
    path.write_text(yaml.safe_dump({"duration_s": 2.0, "initial_lateral_offset_mm": 40.0}))
    result = invoke("run", "--config", path, "--out", tmp_path / "o", "--no-plots")
    assert result.exit_code == 2
    assert "lost_target" in result.output


def test_bad_config_is_reported(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("seed: 1\nnoise:\n  sigma: 2\n")
    result = invoke("run", "--config", path, "--out", tmp_path / "o")
    assert result.exit_code != 0 and "unknown noise keys" in result.output


def test_bad_offsets_rejected(small_config, tmp_path):
    result = invoke("batch", "--config", small_config, "--offsets", "0,abc", "--out", tmp_path / "o")
    assert result.exit_code != 0
