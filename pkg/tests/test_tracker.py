"""Predictor-corrector stream engine: steps, certificates, restarts, runs."""

from types import SimpleNamespace

import numpy as np
import pytest

from eqtrack import equilibrium as eq
from eqtrack import gaussian_model as gm
from eqtrack import sym_geometry as sg
from eqtrack import tracker as tr
from eqtrack.errors import RestartRejected
from eqtrack.sym_geometry import ChartPoint


def make_spec(seed=0, d=3, p=8):
    return gm.draw_model(d, p, np.random.default_rng(seed))


def sample_statistic(spec, seed, t=300):
    rng = np.random.default_rng(seed)
    z = gm.compress(spec, gm.sample_observation(spec, rng, size=t))
    return z.T @ z / t


def test_certified_parameters_values():
    eta, lam, tau = tr.certified_parameters(SimpleNamespace(mu=0.4, l_big=2.0))
    assert (eta, lam) == (1.0, 0.4) and np.isclose(tau, 0.0375)
    eta, lam, tau = tr.certified_parameters(SimpleNamespace(mu=1.0, l_big=1.0))
    assert (eta, lam, tau) == (1.0, 1.0, 0.1875)
    # linear in mu, inverse in the upper band
    _, lam2, tau2 = tr.certified_parameters(SimpleNamespace(mu=2.0, l_big=1.0))
    assert lam2 == 2.0 and np.isclose(tau2, 2 * 0.1875)
    _, _, tau3 = tr.certified_parameters(SimpleNamespace(mu=1.0, l_big=2.0))
    assert np.isclose(tau3, 0.1875 / 2)


def test_predict_zero_increment_and_order_zero():
    spec = make_spec(0)
    d_mat = sample_statistic(spec, 100)
    target = eq.solve_frozen_target(spec, d_mat)
    theta = target.theta
    zero = np.zeros((spec.d, spec.d))
    for cfg in (tr.TrackerConfig(order=0), tr.TrackerConfig(order=1)):
        out = tr.predict(spec, target, theta, zero, cfg)
        assert np.allclose(out.to_vector(), theta.to_vector(), atol=1e-14)


def test_predict_wrong_sign_negates_response():
    spec = make_spec(1)
    d_mat = sample_statistic(spec, 101)
    target = eq.solve_frozen_target(spec, d_mat)
    rng = np.random.default_rng(3)
    delta = 1e-3 * sg.sym_part(rng.standard_normal((3, 3)))
    fwd = tr.predict(spec, target, target.theta, delta, tr.TrackerConfig(order=1))
    rev = tr.predict(spec, target, target.theta, delta,
                     tr.TrackerConfig(order=1, wrong_sign=True))
    mid = 0.5 * (fwd.to_vector() + rev.to_vector())
    assert np.allclose(mid, target.theta.to_vector(), atol=1e-14)
    assert np.linalg.norm(fwd.to_vector() - rev.to_vector()) > 0


def test_one_step_identity():
    # predicted defect equals previous error minus the jet remainder
    spec = make_spec(2)
    d_prev = sample_statistic(spec, 102)
    rng = np.random.default_rng(4)
    delta = 2e-3 * sg.sym_part(rng.standard_normal((3, 3)))
    target_prev = eq.solve_frozen_target(spec, d_prev)
    target_next = eq.solve_frozen_target(spec, d_prev + delta,
                                         init=target_prev.theta)
    e_prev = 0.1 * rng.standard_normal(sg.chart_dim(3))
    theta = ChartPoint.from_vector(target_prev.theta.to_vector() + e_prev, 3)
    tilde = tr.predict(spec, target_prev, theta, delta, tr.TrackerConfig(order=1))
    lhs = tilde.to_vector() - target_next.theta.to_vector()
    remainder = (target_next.theta.to_vector() - target_prev.theta.to_vector()
                 - eq.response_apply(spec, target_prev, delta).to_vector())
    rhs = e_prev - remainder
    assert np.linalg.norm(lhs - rhs) < 1e-10


def test_correct_fixed_point_every_kind():
    spec = make_spec(3)
    d_mat = sample_statistic(spec, 103)
    band = gm.curvature_band(spec)
    target = eq.solve_frozen_target(spec, d_mat)
    for corrector in ("oracle_linear", "damped_newton", "newton_cg"):
        cfg = tr.TrackerConfig(corrector=corrector)
        out, _ = tr.correct(spec, target.theta, d_mat, cfg, band=band,
                            oracle_target=target)
        gap = np.linalg.norm(out.to_vector() - target.theta.to_vector())
        assert gap < 1e-11


def test_correct_certified_contraction_in_tube():
    spec = make_spec(4)
    band = gm.curvature_band(spec)
    cfg = tr.TrackerConfig(corrector="newton_cg")  # certified defaults
    rng = np.random.default_rng(5)
    hits = 0
    trials = 0
    for k in range(5):
        d_mat = sample_statistic(spec, 500 + k)
        target = eq.solve_frozen_target(spec, d_mat)
        for radius in (0.1, 0.3):
            u = rng.standard_normal(sg.chart_dim(3))
            u *= radius / np.linalg.norm(u)
            tilde = ChartPoint.from_vector(target.theta.to_vector() + u, 3)
            out, _ = tr.correct(spec, tilde, d_mat, cfg, band=band)
            e_post = np.linalg.norm(out.to_vector() - target.theta.to_vector())
            if radius == 0.1:
                # deep inside the tube the certificate holds pathwise
                assert e_post <= (7.0 / 8.0) * radius
            trials += 1
            hits += e_post <= (7.0 / 8.0) * radius
    # near the tube edge the 7/8 bound is a high-probability statement
    assert hits / trials >= 0.8


def test_correct_exact_newton_quadratic_on_halvings():
    spec = make_spec(5)
    band = gm.curvature_band(spec)
    d_mat = sample_statistic(spec, 104)
    target = eq.solve_frozen_target(spec, d_mat)
    cfg = tr.TrackerConfig(corrector="damped_newton", damping=0.0)
    rng = np.random.default_rng(6)
    u = rng.standard_normal(sg.chart_dim(3))
    u /= np.linalg.norm(u)
    ratios = []
    for e in (0.2, 0.1, 0.05):
        tilde = ChartPoint.from_vector(target.theta.to_vector() + e * u, 3)
        out, _ = tr.correct(spec, tilde, d_mat, cfg, band=band)
        e_post = np.linalg.norm(out.to_vector() - target.theta.to_vector())
        ratios.append(e_post / e ** 2)
    assert max(ratios) / min(ratios) < 3.0


def test_restart_linear_exact_statistic():
    spec = make_spec(6)
    sigma_hat = tr.restart_linear(spec, spec.d_star)
    assert np.linalg.norm(sigma_hat - spec.sigma_star) < 1e-12


def test_restart_linear_rejects_zero_excess():
    spec = make_spec(7)
    with pytest.raises(RestartRejected):
        tr.restart_linear(spec, spec.g.copy())


def test_restart_linear_perturbation_bound():
    spec = make_spec(8)
    g_inv_op = np.linalg.norm(np.linalg.inv(spec.g), ord=2)
    rng = np.random.default_rng(9)
    for _ in range(10):
        pert = 1e-3 * sg.sym_part(rng.standard_normal((3, 3)))
        sigma_hat, rejected = tr.linear_restart_batch(spec, spec.d_star + pert)
        assert not rejected
        bound = np.sqrt(3) * g_inv_op ** 2 * np.linalg.norm(pert, ord=2)
        assert np.linalg.norm(sigma_hat - spec.sigma_star) <= bound * (1 + 1e-12)


def test_spd_floor_produces_usable_point():
    m = np.diag([2.0, -1.0, 0.0])
    out = tr.spd_floor(m)
    w = np.linalg.eigvalsh(out)
    assert np.all(w > 0)
    assert np.min(np.diff(np.sort(w))) > 0  # chart needs a simple spectrum
    assert np.allclose(out, out.T)


def test_guard_exit_flags_far_points():
    n = sg.chart_dim(3)
    assert not tr._guard_exit(np.zeros(n), 3)
    far = np.zeros(n)
    far[0] = 5.0
    assert tr._guard_exit(far, 3)
    assert tr._guard_exit(np.full(n, np.nan), 3)


def test_run_stream_records_and_flags():
    spec = make_spec(10)
    cfg = tr.TrackerConfig(order=1, corrector="newton_cg")
    rec = tr.run_stream(spec, 120, 42, cfg)
    assert rec.t0 == 60
    assert rec.t.shape == rec.e.shape == rec.in_tube.shape
    assert rec.t[0] == rec.t0 and rec.t[-1] == 120
    if not rec.exited:
        assert np.isfinite(rec.e_final)
        assert rec.e_final == pytest.approx(rec.e[-1])
    assert isinstance(rec.tube_ok, bool)


def test_run_stream_batch_arms_share_stream():
    spec = make_spec(11)
    seeds = list(range(6))
    arms = [tr.TrackerConfig(order=0, corrector="oracle_linear", init="oracle"),
            tr.TrackerConfig(order=1, corrector="oracle_linear", init="oracle")]
    res0, res1 = tr.run_stream_batch(spec, 240, seeds, arms)
    # both arms track the same per-replicate frozen targets
    assert np.allclose(res0.target_final, res1.target_final)
    m0 = np.nanmedian(res0.e_final)
    m1 = np.nanmedian(res1.e_final)
    assert m1 < m0  # first-order extrapolation helps


def test_run_stream_batch_oracle_init_stays_in_tube():
    spec = make_spec(12)
    arms = [tr.TrackerConfig(order=1, corrector="newton_cg", init="oracle")]
    (res,) = tr.run_stream_batch(spec, 160, list(range(5)), arms)
    assert not np.any(res.exited)
    assert np.all(res.in_tube_final)
    assert res.cert_steps > 0
    assert res.cert_ok / res.cert_steps >= 0.9
    assert res.mean_contraction <= 1.0
