import json
import subprocess
import sys

import pytest

from revrnn.cli import main


def write_cfg(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_verify_selected_suites(capsys):
    assert main(["verify", "--suite", "buffer", "--suite", "noise", "--cases", "2000"]) == 0
    assert main(["verify", "--suite", "limbs", "--cases", "2"]) == 0
    out = capsys.readouterr().out
    assert "buffer" in out and "noise" in out and "limbs" in out and "FAIL" not in out


def test_verify_fault_injection_is_located(capsys):
    assert main(["verify", "--suite", "cells", "--cases", "2", "--inject-fault"]) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out
    assert "t=" in out and "unit" in out


def test_missing_config_exits_2(tmp_path, capsys):
    assert main(["train", str(tmp_path / "nope.cfg")]) == 2
    assert "cannot read config" in capsys.readouterr().err


def test_bad_config_value_reports_line(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "task = repeat\nhidden = lots\n")
    assert main(["train", str(cfg), "--out", str(tmp_path / "r")]) == 2
    assert "run.cfg:2:" in capsys.readouterr().err


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as info:
        main(["train", "x.cfg", "--bits-limit", "4"])
    assert info.value.code == 2


def test_nf_repeat_run_logs_zero_buffer_bits(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "task = repeat\ncell = nf-revgru\nhidden = 16\nT = 20\nbatch = 8\nsteps = 3\nn_eval = 50\n")
    out = tmp_path / "nf"
    assert main(["train", str(cfg), "--out", str(out), "--quiet", "--no-wall-clock"]) == 0
    lines = (out / "log.csv").read_text().splitlines()
    assert lines[0] == "step,loss,tokens_correct,measured_bits,ideal_bits,savings_ratio,wall_ms"
    assert len(lines) == 4
    for row in lines[1:]:
        f = row.split(",")
        assert f[3] == "0" and f[5] == "inf" and float(f[6]) == 0.0


def test_resume_is_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path, "task = memorize\ncell = revlstm\nhidden = 8\nT = 6\nbatch = 8\nsteps = 6\nn_eval = 20\n")
    full, part = tmp_path / "full", tmp_path / "part"
    assert main(["train", str(cfg), "--out", str(full), "--quiet", "--no-wall-clock"]) == 0
    assert main(["train", str(cfg), "--out", str(part), "--steps", "3", "--quiet", "--no-wall-clock"]) == 0
    assert main(["train", "--resume", str(part), "--steps", "6", "--quiet", "--no-wall-clock"]) == 0
    assert (full / "log.csv").read_bytes() == (part / "log.csv").read_bytes()
    assert (full / "params.bin").read_bytes() == (part / "params.bin").read_bytes()


def test_memstats_report(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "task = repeat\ncell = revgru\nhidden = 8\nT = 20\nbatch = 8\nsteps = 3\nn_eval = 20\n")
    out = tmp_path / "r"
    assert main(["train", str(cfg), "--out", str(out), "--bits-limit", "2", "--quiet", "--no-wall-clock"]) == 0
    capsys.readouterr()
    assert main(["memstats", str(out), "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report == json.loads((out / "memstats.json").read_text())
    assert report["bits_limit"] == 2 and report["steps"] == 3
    assert report["ratios"]["savings_min"] > 1
    assert report["bits"]["measured_over_ideal"] >= 1
    assert "snapshot" in report


def test_memstats_rejects_non_run_dir(tmp_path, capsys):
    assert main(["memstats", str(tmp_path)]) == 2


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "revrnn", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "verify" in r.stdout
