import json
import math
import subprocess
import sys

import numpy as np
import pytest

from kgflow.cli import run

BAND_TOML = """\
kernel = "matern32:h=0.4330127018922193"
truth = "f3"
time_rule = "topt"
multipliers = [2.0]

[band]
n = 120

[coverage-exp]
n_list = [60]
reps = 4
"""

RATE_TOML = """\
kernel = "min"
truth = "f1"

[rate-exp]
c = 10.0
s = 1.5
n_list = [40, 80, 160]
reps = 2

[saturation-exp]
truth = "f2"
c = 100.0
n_list = [40, 80]
reps = 2
"""


@pytest.fixture
def cfgdir(tmp_path):
    (tmp_path / "band.toml").write_text(BAND_TOML)
    (tmp_path / "rate.toml").write_text(RATE_TOML)
    return tmp_path


def _read_table(path):
    lines = path.read_text().splitlines()
    header = [l for l in lines if l.startswith("#")]
    body = [l for l in lines if not l.startswith("#")]
    return header, body


def test_band_deterministic(cfgdir):
    for out in ("a", "b"):
        assert run(["band", "--config", str(cfgdir / "band.toml"), "--seed", "7",
                    "--grid", "201", "--out", str(cfgdir / out)]) == 0
    for name in ("band_matern32_continuous.csv", "band_matern32_continuous.json"):
        assert (cfgdir / "a" / name).read_bytes() == (cfgdir / "b" / name).read_bytes()


def test_band_output_contract(cfgdir):
    assert run(["band", "--config", str(cfgdir / "band.toml"), "--grid", "101", "--out", str(cfgdir)]) == 0
    header, body = _read_table(cfgdir / "band_matern32_continuous.csv")
    keys = {l[2:].split(" = ")[0] for l in header[1:]}
    assert {"n", "t", "mode", "B", "q", "r", "seed", "kernel", "sigma", "grid_size"} <= keys
    assert body[0] == "x,center,lower,upper,half_width"
    rows = np.array([[float(v) for v in l.split(",")] for l in body[1:]])
    assert rows.shape == (101 + 120, 5)
    assert np.all(np.diff(rows[:, 0]) >= 0)
    np.testing.assert_allclose(rows[:, 3] - rows[:, 2], 2 * rows[:, 4], rtol=1e-4, atol=1e-6)
    summary = json.loads((cfgdir / "band_matern32_continuous.json").read_text())
    assert summary["B"] == 100 and len(summary["samples"]) == 100
    assert summary["t"] == pytest.approx(24.0)


def test_seed_changes_output(cfgdir):
    for out, seed in (("a", "1"), ("b", "2")):
        run(["band", "--config", str(cfgdir / "band.toml"), "--seed", seed, "--grid", "51", "--out", str(cfgdir / out)])
    name = "band_matern32_continuous.csv"
    assert (cfgdir / "a" / name).read_bytes() != (cfgdir / "b" / name).read_bytes()


def test_rate_table(cfgdir):
    assert run(["rate-exp", "--config", str(cfgdir / "rate.toml"), "--grid", "101", "--out", str(cfgdir)]) == 0
    header, body = _read_table(cfgdir / "rate_min_continuous.csv")
    assert body[0].startswith("n,t,reps")
    assert [int(l.split(",")[0]) for l in body[1:]] == [40, 80, 160]
    assert header[-1].startswith("# summary: slope = ")
    slope = float(header[-1].split("slope = ")[1].split(",")[0])
    summary = json.loads((cfgdir / "rate_min_continuous.json").read_text())
    assert slope == pytest.approx(summary["slope"], rel=1e-5)
    assert any(l == "# c = 10.0" for l in header)


def test_six_significant_digits(cfgdir):
    run(["rate-exp", "--config", str(cfgdir / "rate.toml"), "--grid", "101", "--out", str(cfgdir)])
    _, body = _read_table(cfgdir / "rate_min_continuous.csv")
    for cell in body[1].split(",")[3:]:
        digits = cell.lstrip("-").replace(".", "").split("e")[0].lstrip("0")
        assert len(digits) <= 6


def test_threads_do_not_change_output(cfgdir):
    for out, threads in (("a", "1"), ("b", "3")):
        run(["coverage-exp", "--config", str(cfgdir / "band.toml"), "--grid", "51", "--bootstrap", "10",
             "--threads", threads, "--out", str(cfgdir / out)])
    a = _read_table(cfgdir / "a" / "coverage_matern32_continuous.csv")
    b = _read_table(cfgdir / "b" / "coverage_matern32_continuous.csv")
    assert a[1] == b[1]


def test_saturation_and_fit(cfgdir):
    assert run(["saturation-exp", "--config", str(cfgdir / "rate.toml"), "--grid", "51", "--out", str(cfgdir)]) == 0
    _, body = _read_table(cfgdir / "saturation_min_all.csv")
    assert "krr_mean_error" in body[0] and len(body) == 1 + 3 * 2
    assert run(["fit", "--config", str(cfgdir / "band.toml"), "--grid", "51", "--out", str(cfgdir)]) == 0
    summary = json.loads((cfgdir / "fit_matern32_continuous.json").read_text())
    assert math.isfinite(summary["sup_error"]) and len(summary["beta"]) == 500


def test_fit_from_data_file(cfgdir):
    rng = np.random.default_rng(0)
    x = rng.uniform(size=40)
    lines = ["x,y"] + [f"{float(a)!r},{float(np.sin(6 * a))!r}" for a in x]
    (cfgdir / "xy.csv").write_text("\n".join(lines) + "\n")
    (cfgdir / "fit.toml").write_text(f'data = "{cfgdir / "xy.csv"}"\n[fit]\nt = 50.0\nmethod = "krr"\n')
    assert run(["fit", "--config", str(cfgdir / "fit.toml"), "--grid", "11", "--out", str(cfgdir)]) == 0
    summary = json.loads((cfgdir / "fit_min_krr.json").read_text())
    assert summary["n"] == 40 and summary["params"]["lambda"] == pytest.approx(0.02)


def test_verify():
    assert run(["verify"]) == 0


@pytest.mark.parametrize("argv", [
    ["nope"],
    ["band", "--frobnicate"],
    ["band", "--seed", "abc"],
    [],
])
def test_usage_errors(argv, capsys):
    assert run(argv) == 2
    assert "error" in capsys.readouterr().err


@pytest.mark.parametrize("text", [
    "bogus = 1\n",
    "[band]\nreps = 'many'\n",
    "[coverage-exp]\nn = 10\n",
    "[unknown]\nx = 1\n",
    "kernel = 'rbf'\n",
    "sigma = [1\n",
])
def test_config_errors(tmp_path, text, capsys):
    path = tmp_path / "bad.toml"
    path.write_text(text)
    sub = "coverage-exp" if "coverage" in text else "band"
    assert run([sub, "--config", str(path), "--out", str(tmp_path)]) == 2
    assert capsys.readouterr().err


def test_numerical_failure_exit_code(tmp_path, capsys):
    # The Min kernel vanishes at 0, so a band on a grid starting there cannot be studentized.
    path = tmp_path / "deg.toml"
    path.write_text("kernel = 'min'\n[band]\nn = 30\n")
    assert run(["band", "--config", str(path), "--grid", "21", "--out", str(tmp_path)]) == 1
    assert "grid_start" in capsys.readouterr().err
    path.write_text("kernel = 'min'\ngrid_start = 0.01\n[band]\nn = 30\n")
    assert run(["band", "--config", str(path), "--grid", "21", "--out", str(tmp_path)]) == 0


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "kgflow", "rate-exp", "--frobnicate"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
