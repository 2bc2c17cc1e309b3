import json
import math

import pytest

from ce_excavator.cli import ConfigError, main, parse_config

FAST = {"windows": 1, "window_start": 8, "max_elements": 48, "grid_points": 20000,
        "outside_samples": 2000, "precision_bits": 128, "verify": {"history_R": 6}}


def write_config(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def test_defaults_parse():
    cfg = parse_config("")
    assert cfg["epsilon"] == 1e-6 and cfg["precision_bits"] == 256


def test_delta_prime_must_exceed_delta(tmp_path, capsys):
    path = write_config(tmp_path, {"delta": 0.05, "delta_prime": 0.01})
    assert main(["constants", "--config", path]) == 2
    assert "delta_prime" in capsys.readouterr().err


def test_bad_json_reports_position(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{"epsilon": 1e-6,\n "windows": }')
    assert main(["exclude", "--config", str(p)]) == 2
    err = capsys.readouterr().err
    assert "line 2" in err and "column" in err


def test_unknown_field_named():
    with pytest.raises(ConfigError) as exc:
        parse_config('{"epsilonn": 1}')
    assert exc.value.field == "epsilonn"


def test_precision_floor(tmp_path):
    assert main(["constants", "--precision-bits", "32"]) == 2


def test_orbit_zero_steps(tmp_path):
    path = write_config(tmp_path, {"orbit": {"l": 1, "a": "0", "n": 0}})
    out = tmp_path / "o"
    assert main(["orbit", "--config", path, "--out", str(out)]) == 0
    rep = json.loads((out / "orbit.json").read_text())
    assert len(rep["orbit"]) == 1 and rep["orbit"][0]["point"] == "inf"
    assert rep["returns"] == []
    lines = (out / "orbit.csv").read_text().splitlines()
    assert len(lines) == 2


def test_orbit_lattes_exponent(tmp_path):
    path = write_config(tmp_path, {"orbit": {"l": "inf", "a": "0", "n": 60}})
    out = tmp_path / "o"
    assert main(["orbit", "--config", path, "--out", str(out)]) == 0
    rep = json.loads((out / "orbit.json").read_text())
    assert rep["lyapunov_min"] == pytest.approx(math.log(4), abs=1e-9)
    assert rep["certified_horizon"] == 60


def test_zero_windows_start_only(tmp_path):
    path = write_config(tmp_path, dict(FAST, windows=0))
    out = tmp_path / "x"
    assert main(["exclude", "--config", path, "--out", str(out)]) == 0
    rep = json.loads((out / "exclusion.json").read_text())
    assert rep["windows"] == [] and len(rep["entries"]) == 1
    entry = rep["entries"][0]["1"]
    assert entry["window"][0] == 0 and "audits" not in entry


def test_reruns_are_byte_identical(tmp_path, monkeypatch):
    path = write_config(tmp_path, FAST)
    outs = []
    for i, threads in enumerate(("1", "1", "4")):
        monkeypatch.setenv("CE_EXCAVATOR_THREADS", threads)
        out = tmp_path / f"run{i}"
        assert main(["exclude", "--config", path, "--out", str(out)]) == 0
        outs.append(((out / "exclusion.json").read_bytes(), (out / "intervals.csv").read_bytes()))
    assert outs[0] == outs[1] == outs[2]
    rep = json.loads(outs[0][0])
    for entry in rep["entries"]:
        assert entry["1"]["balance_error"] <= 1e-12


def test_intervals_csv_header(tmp_path):
    path = write_config(tmp_path, FAST)
    out = tmp_path / "x"
    assert main(["exclude", "--config", path, "--out", str(out)]) == 0
    head = (out / "intervals.csv").read_text().splitlines()[0]
    assert head == "a_lo,a_hi,l,status,last_return,exponent_lower"


def test_verify_passes_on_small_run(tmp_path):
    path = write_config(tmp_path, FAST)
    out = tmp_path / "v"
    assert main(["verify", "--config", path, "--out", str(out)]) == 0
    summary = json.loads((out / "verify.json").read_text())
    assert summary["failed"] == []
    assert summary["hard"]["history_count"]["ok"]


def test_verify_flags_failing_doubling_fixture(tmp_path, capsys):
    # 40 fixture pairs that never double swamp the genuine records
    cfg = dict(FAST, verify={"history_R": 4, "fixtures": {"doubling": [[1.0, 1.5]] * 40}})
    path = write_config(tmp_path, cfg)
    out = tmp_path / "v"
    assert main(["verify", "--config", path, "--out", str(out)]) == 3
    summary = json.loads((out / "verify.json").read_text())
    assert "soft:doubling" in summary["failed"]
    assert "doubling" in capsys.readouterr().err


def test_constants_command(capsys):
    assert main(["constants", "--precision-bits", "128"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["gamma0"] == pytest.approx(math.log(4), abs=1e-9)
    assert data["Kb"] == pytest.approx(math.exp(-9))
