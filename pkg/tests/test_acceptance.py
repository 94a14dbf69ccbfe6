"""Acceptance suite: every headline claim at its stated full tolerance.

Each criterion is one test, so the verbose pytest report carries one
pass/fail line per criterion.  Experiments run once at the default seed
and are shared between criteria that read different checks of the same
run (the conjugate-gradient ablation also carries the certified
contraction check; the moment-oracle run carries the Wishart check).
"""

import time

import pytest

from eqtrack.harness import cli, experiments

SEED = 123

_cache = {}


def run_experiment(name):
    """Run one experiment at full scale once and cache its checks."""
    if name not in _cache:
        t_start = time.time()
        _config, _rows, checks = experiments.EXPERIMENTS[name](SEED)
        _cache[name] = (checks, time.time() - t_start)
    return _cache[name]


def assert_all(checks, keep=None, drop=None):
    sel = checks
    if keep is not None:
        sel = [c for c in sel if any(c.name.startswith(p) for p in keep)]
    if drop is not None:
        sel = [c for c in sel if not any(c.name.startswith(p) for p in drop)]
    assert sel, "no matching acceptance checks"
    for c in sel:
        status = "PASS" if c.passed else "FAIL"
        print(f"{status} {c.name}: measured {c.measured:.6g} "
              f"(expected {c.expected}, tolerance {c.tolerance:g})")
    failed = [c.name for c in sel if not c.passed]
    assert not failed, f"failed checks: {failed}"


def test_criterion_01_audit_identities_and_fd():
    checks, elapsed = run_experiment("audit")
    assert_all(checks)
    assert elapsed < 30.0


def test_criterion_02_scalar_predictor_order():
    checks, _ = run_experiment("scalar-order")
    assert_all(checks)


def test_criterion_03_corrector_order():
    checks, _ = run_experiment("corrector-order")
    assert_all(checks)


def test_criterion_04_damping_degrades_order():
    checks, _ = run_experiment("damping")
    assert_all(checks)


def test_criterion_05_gaussian_tracking_slopes():
    checks, _ = run_experiment("gauss-track")
    assert_all(checks)


def test_criterion_06_batch_to_online_transfer():
    checks, _ = run_experiment("transfer")
    assert_all(checks)


def test_criterion_07_certified_contraction():
    checks, _ = run_experiment("cg-ablation")
    assert_all(checks, keep=("certified_",))


def test_criterion_08_cg_inexactness_ablation():
    checks, _ = run_experiment("cg-ablation")
    assert_all(checks, drop=("certified_",))


def test_criterion_09_isserlis_covariance_oracle():
    checks, _ = run_experiment("isserlis")
    assert_all(checks, keep=("isserlis_",))


def test_criterion_10_restart_localization():
    checks, _ = run_experiment("restart")
    assert_all(checks)


def test_criterion_11_wishart_moment_oracle():
    checks, _ = run_experiment("isserlis")
    assert_all(checks, keep=("wishart_",))


def test_criterion_12_quick_run_all(tmp_path):
    t_start = time.time()
    code = cli.main(["--quick", "--out-dir", str(tmp_path), "run-all"])
    elapsed = time.time() - t_start
    print(f"run-all --quick: exit {code} in {elapsed:.1f}s")
    assert code == 0
    assert elapsed <= 300.0
    assert (tmp_path / "acceptance.csv").exists()
