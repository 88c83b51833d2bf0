import csv
import json
import math

import numpy as np
import pytest

from tmdwigner.cli import main
from tmdwigner.config import DEFAULTS, default_config_text, load_config
from tmdwigner.errors import ConfigError
from tmdwigner.tags import read_binary, read_text

SMALL = ["--set", "run.pulses=20000", "--set", "run.reference_pulses=20000",
         "--set", "run.calibration_pulses=20000", "--set", "detector.n_max=4",
         "--set", "displacement.alphas=0,0.5", "--trials", "200"]


def _rows(path):
    with open(path) as fh:
        lines = [l for l in fh if not l.startswith("#")]
    return list(csv.DictReader(lines))


def test_defaults_load():
    cfg = load_config()
    assert cfg.efficiency == 0.165 and cfg.bins == 8 and cfg.overlap == 0.70
    assert cfg.rho.probs.tolist() == [0.002, 0.942, 0.054, 0.002]
    assert cfg.settings()[0].alpha_mag == 0.0
    assert set(DEFAULTS) == {s.strip("[]") for s in default_config_text().splitlines() if s.startswith("[")}


def test_config_errors_name_the_line(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[detector]\nbins = 8\n\nefficiency = 1.5\n")
    with pytest.raises(ConfigError) as info:
        load_config(p)
    assert info.value.line == 4
    assert f"{p}:4:" in str(info.value)
    p.write_text("[run]\nseed = 1\nspeed = 3\n")
    with pytest.raises(ConfigError, match=":3:.*speed"):
        load_config(p)
    p.write_text("[nonsense]\nx = 1\n")
    with pytest.raises(ConfigError, match="nonsense"):
        load_config(p)


def test_set_overrides_file(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[detector]\nefficiency = 0.3\n")
    assert load_config(p).efficiency == 0.3
    assert load_config(p, ["detector.efficiency=0.4"]).efficiency == 0.4
    assert load_config(None, None, seed=5, trials=7).seed == 5
    with pytest.raises(ConfigError, match="--set"):
        load_config(None, ["detector.efficiency=2"])
    with pytest.raises(ConfigError):
        load_config(None, ["efficiency=2"])


@pytest.mark.parametrize("override", ["run.pulses=0", "displacement.alphas=", "detector.n_max=9",
                                      "source.rho=0.5,0.4", "timing.gate_width_ps=200000"])
def test_invalid_configs_exit_2(tmp_path, override, capsys):
    assert main(["simulate", "--out-dir", str(tmp_path), "--set", override]) == 2
    assert "tmdwigner:" in capsys.readouterr().err


def test_missing_input_exits_3(tmp_path):
    assert main(["analyze", "--out-dir", str(tmp_path / "nothing")]) == 3


def test_default_config_command(capsys):
    assert main(["default-config"]) == 0
    assert "[detector]" in capsys.readouterr().out


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["simulate", "--out-dir", str(out), *SMALL]) == 0
    assert main(["analyze", "--out-dir", str(out)]) == 0
    return out


def test_simulate_outputs(small_run):
    manifest = json.loads((small_run / "manifest.json").read_text())
    roles = sorted(e["role"] for e in manifest["files"])
    assert roles == ["calibration", "reference", "signal", "signal"]
    assert (small_run / "config.ini").read_text().startswith("# seed=2010")
    for e in manifest["files"]:
        assert read_binary(small_run / e["path"]).size > 0


def test_analyze_outputs(small_run):
    stats = _rows(small_run / "statistics.csv")
    assert list(stats[0]) == ["alpha", "n", "rho", "err_lo", "err_hi"]
    assert len(stats) == 2 * 5
    wig = _rows(small_run / "wigner.csv")
    assert list(wig[0]) == ["alpha", "W", "err"]
    assert float(wig[0]["W"]) < -0.4 and float(wig[0]["err"]) > 0
    assert (small_run / "wigner.csv").read_text().startswith("# tmdwigner")
    report = json.loads((small_run / "report.json").read_text())
    assert report["failed_points"] == []
    assert report["calibration"]["eta"] == pytest.approx(0.165, abs=0.02)
    assert report["points"][1]["alpha"] == pytest.approx(0.5, abs=0.05)
    hist = _rows(small_run / "histogram_00.csv")
    assert sum(int(r["conditioned_count"]) for r in hist) == report["points"][0]["heralds"]


def test_runs_are_deterministic(small_run, tmp_path):
    assert main(["simulate", "--out-dir", str(tmp_path), *SMALL]) == 0
    assert main(["analyze", "--out-dir", str(tmp_path)]) == 0
    for name in ("signal_01_alpha0.500.bin", "statistics.csv", "wigner.csv"):
        assert (tmp_path / name).read_bytes() == (small_run / name).read_bytes()


def test_seed_changes_output(small_run, tmp_path):
    assert main(["simulate", "--out-dir", str(tmp_path), *SMALL, "--seed", "7"]) == 0
    assert (tmp_path / "signal_00_alpha0.000.bin").read_bytes() != \
        (small_run / "signal_00_alpha0.000.bin").read_bytes()


def test_text_format(tmp_path):
    assert main(["simulate", "--out-dir", str(tmp_path), *SMALL, "--set", "run.format=text"]) == 0
    tags, meta = read_text(tmp_path / "calibration.txt")
    assert meta["pulses"] == 20000 and tags.size > 0
    assert main(["calibrate", "--out-dir", str(tmp_path)]) == 0
    cal = json.loads((tmp_path / "calibration.json").read_text())
    assert cal["eta"] == pytest.approx(0.165, abs=0.02)


def test_failed_point_exits_4(tmp_path, capsys):
    args = ["--set", "run.pulses=20000", "--set", "run.reference_pulses=20000",
            "--set", "run.calibration_pulses=20000", "--set", "displacement.alphas=0,2.0",
            "--trials", "200"]
    assert main(["simulate", "--out-dir", str(tmp_path), *args]) == 0
    assert main(["analyze", "--out-dir", str(tmp_path)]) == 4
    assert "|alpha|=2" in capsys.readouterr().err
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["failed_points"] == [1]
    assert math.isnan(report["points"][1]["W_err"])


def test_matrices(tmp_path):
    assert main(["matrices", "--out-dir", str(tmp_path), "--set", "detector.efficiency=1",
                 "--set", "detector.bins=4", "--set", "detector.n_max=4"]) == 0
    L = np.array([[float(v) for v in list(r.values())[1:]] for r in _rows(tmp_path / "L.csv")])
    assert np.array_equal(L, np.eye(5))
    C = np.array([[float(v) for v in list(r.values())[1:]] for r in _rows(tmp_path / "C.csv")])
    # two photons into four equal bins share a bin with probability 1/4
    assert C[1, 2] == pytest.approx(0.25) and C[2, 2] == pytest.approx(0.75)
    cond = _rows(tmp_path / "condition.csv")[0]
    assert cond["matrix"] == "CL" and float(cond["condition_number"]) >= 1
