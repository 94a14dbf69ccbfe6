"""Harness statistics, CSV output, CLI behavior and determinism."""

import filecmp
import os

import numpy as np
import pytest

from eqtrack.errors import InsufficientData
from eqtrack.harness import cli, experiments, stats


def test_fit_slope_exact_power_law():
    grid = [200, 400, 800, 1600, 3200]
    pts = [(t, 3.2 * t ** -2.0) for t in grid]
    fit = stats.fit_slope(pts)
    assert abs(fit.slope + 2.0) < 1e-10
    assert abs(fit.intercept - np.log(3.2)) < 1e-10
    assert fit.ci95_halfwidth < 1e-10
    assert abs(fit.local_slope_last + 2.0) < 1e-10


def test_fit_slope_noisy_recovery():
    rng = np.random.default_rng(0)
    grid = np.array([100, 200, 400, 800, 1600, 3200])
    rms = 5.0 * grid ** -1.5 * np.exp(0.05 * rng.standard_normal(grid.size))
    fit = stats.fit_slope(list(zip(grid, rms)))
    assert abs(fit.slope + 1.5) < 0.1
    assert fit.ci95_halfwidth > 0


def test_fit_slope_rejects_bad_input():
    with pytest.raises(InsufficientData):
        stats.fit_slope([(100, 1.0), (200, 0.5)])
    with pytest.raises(InsufficientData):
        stats.fit_slope([(100, 1.0), (200, 0.5), (400, 0.0)])


def test_local_slope_last_uses_final_pair():
    pts = [(100, 1.0), (200, 0.5), (400, 0.125)]
    assert abs(stats.local_slope_last(pts) + 2.0) < 1e-12


def test_ks_normal_on_normal_sample():
    rng = np.random.default_rng(1)
    d = stats.ks_normal(rng.standard_normal(500))
    assert d <= 0.08


def test_ks_normal_degenerate_sample():
    # all-zero sample: the empirical CDF jumps from 0 to 1 at the median
    assert abs(stats.ks_normal(np.zeros(100)) - 0.5) < 1e-12


def test_ks_normal_rejects_tiny_sample():
    with pytest.raises(InsufficientData):
        stats.ks_normal(np.ones(5))


def test_check_helpers():
    assert experiments.check_near("a", -2.1, -2.0, 0.2).passed
    assert not experiments.check_near("a", -2.5, -2.0, 0.2).passed
    assert experiments.check_below("b", 0.5, 1.0).passed
    assert not experiments.check_below("b", 1.5, 1.0).passed
    assert experiments.check_above("c", 0.97, 0.95).passed
    assert not experiments.check_above("c", 0.5, 0.95).passed


def test_trimmed_rms_kills_single_outlier():
    rng = np.random.default_rng(2)
    x = np.abs(rng.standard_normal(100))
    y = x.copy()
    y[0] = 1e6
    plain = float(np.sqrt(np.mean(y ** 2)))
    trimmed, se = experiments._trimmed_rms(y)
    ref, _ = experiments._trimmed_rms(x)
    assert plain > 1e4
    assert abs(trimmed - ref) < 0.2
    assert se >= 0


def test_fmt_floats():
    assert cli._fmt(0.1) == "0.1"
    assert cli._fmt(float("nan")) == ""
    assert cli._fmt(3) == "3"
    assert cli._fmt("abc") == "abc"


def _run_cli(args, out_dir):
    return cli.main(["--out-dir", str(out_dir)] + args)


def test_cli_writes_csv_and_exits_zero(tmp_path):
    code = _run_cli(["--quick", "audit"], tmp_path)
    assert code == 0
    rows_csv = tmp_path / "audit.csv"
    acc_csv = tmp_path / "acceptance.csv"
    assert rows_csv.exists() and acc_csv.exists()
    lines = rows_csv.read_text().splitlines()
    header = [ln for ln in lines if ln.startswith("#")]
    assert header  # config recorded as comments
    cols = [ln for ln in lines if not ln.startswith("#")][0]
    assert cols == ",".join(cli.CSV_COLUMNS)
    acc = acc_csv.read_text().splitlines()
    assert acc[0] == "check,expected,measured,tolerance,pass"
    assert all(ln.endswith(",true") for ln in acc[1:])


def test_cli_byte_identical_reruns(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for d in (a, b):
        os.makedirs(d)
        # determinism must hold regardless of check outcomes at this seed
        _run_cli(["--quick", "--seed", "7", "scalar-order"], d)
    for name in ("scalar_order.csv", "acceptance.csv"):
        assert filecmp.cmp(a / name, b / name, shallow=False)


def test_cli_seed_changes_output(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    os.makedirs(a)
    os.makedirs(b)
    _run_cli(["--quick", "--seed", "7", "scalar-order"], a)
    _run_cli(["--quick", "--seed", "8", "scalar-order"], b)
    assert not filecmp.cmp(a / "scalar_order.csv", b / "scalar_order.csv",
                           shallow=False)


def test_cli_exit_code_reflects_failures(tmp_path, monkeypatch, capsys):
    def failing(seed, quick=False, replicates=None, workers=1):
        checks = [experiments.check_below("forced_failure", measured=2.0,
                                          bound=1.0)]
        return {"seed": seed}, [], checks

    monkeypatch.setitem(experiments.EXPERIMENTS, "audit", failing)
    code = _run_cli(["audit"], tmp_path)
    assert code == 1
    out = capsys.readouterr().out
    assert "FAIL forced_failure" in out
    acc = (tmp_path / "acceptance.csv").read_text()
    assert "false" in acc


def test_registry_covers_cli_subcommands():
    parser = cli.build_parser()
    args = parser.parse_args(["--quick", "run-all"])
    assert args.command == "run-all"
    for name in experiments.EXPERIMENTS:
        assert parser.parse_args([name]).command == name
