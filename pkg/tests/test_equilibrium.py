"""Frozen target solves, response operator, Taylor remainder, constants."""

import numpy as np
import pytest

from eqtrack import equilibrium as eq
from eqtrack import gaussian_model as gm
from eqtrack import sym_geometry as sg
from eqtrack.errors import NotConverged


def make_spec(seed=0, d=3, p=8):
    return gm.draw_model(d, p, np.random.default_rng(seed))


def sample_statistic(spec, seed, t=300):
    rng = np.random.default_rng(seed)
    z = gm.compress(spec, gm.sample_observation(spec, rng, size=t))
    return z.T @ z / t


def test_population_statistic_has_trivial_target():
    spec = make_spec(0)
    target = eq.solve_frozen_target(spec, spec.d_star)
    assert np.linalg.norm(target.theta.to_vector()) < 1e-10
    assert target.residual < 1e-12


def test_frozen_target_is_critical_point():
    spec = make_spec(1)
    d_mat = sample_statistic(spec, 100)
    target = eq.solve_frozen_target(spec, d_mat)
    state = eq.chart_state(spec, target.theta.to_vector(), d_mat)
    assert np.linalg.norm(eq.score_fixed(state, spec)) < 1e-11
    # the stored Hessian is SPD at the minimizer
    assert np.min(np.linalg.eigvalsh(target.hessian)) > 0


def test_target_minimizes_objective_locally():
    spec = make_spec(2)
    d_mat = sample_statistic(spec, 101)
    target = eq.solve_frozen_target(spec, d_mat)
    sigma_t = sg.chart_exp(spec.base, target.theta)
    val0 = gm.objective(spec, sigma_t, d_mat)
    rng = np.random.default_rng(7)
    for _ in range(5):
        u = sg.sym_part(rng.standard_normal((3, 3)))
        u *= 1e-3 / np.linalg.norm(u)
        assert gm.objective(spec, sigma_t + u, d_mat) >= val0 - 1e-12


def test_response_matches_finite_difference():
    spec = make_spec(3)
    d_prev = sample_statistic(spec, 102)
    rng = np.random.default_rng(8)
    delta = sg.sym_part(rng.standard_normal((3, 3)))
    delta *= 1e-4 / np.linalg.norm(delta)
    target_prev = eq.solve_frozen_target(spec, d_prev)
    target_next = eq.solve_frozen_target(spec, d_prev + delta,
                                         init=target_prev.theta)
    resp = eq.response_apply(spec, target_prev, delta)
    fd = target_next.theta.to_vector() - target_prev.theta.to_vector()
    err = np.linalg.norm(resp.to_vector() - fd)
    assert err < 1e-2 * np.linalg.norm(fd)  # agreement to first order
    assert err < 5e-7  # absolute remainder at this increment size


def test_jet_remainder_quadratic_scaling():
    spec = make_spec(4)
    d_prev = sample_statistic(spec, 103)
    rng = np.random.default_rng(9)
    delta = sg.sym_part(rng.standard_normal((3, 3)))
    delta /= np.linalg.norm(delta)
    sizes = (0.02, 0.01, 0.005)
    ratios = []
    for s in sizes:
        rem, _, _, _ = eq.jet_remainder_probe(spec, d_prev, d_prev + s * delta)
        ratios.append(np.linalg.norm(rem.to_vector()) / s ** 2)
    # remainder / step^2 is constant when the remainder is quadratic
    assert max(ratios) / min(ratios) < 1.5


def test_batch_solver_matches_single():
    spec = make_spec(5)
    d_mats = np.stack([sample_statistic(spec, 200 + k) for k in range(3)])
    vec, res, iters, h_own, cache, ok = eq.frozen_newton_batch(spec, d_mats)
    assert np.all(ok)
    for k in range(3):
        single = eq.solve_frozen_target(spec, d_mats[k])
        assert np.linalg.norm(vec[k] - single.theta.to_vector()) < 1e-10


def test_batch_solver_shapes_and_mask():
    spec = make_spec(6)
    d_mats = np.stack([sample_statistic(spec, 300 + k) for k in range(4)])
    mask = np.array([True, False, True, False])
    init = np.zeros((4, sg.chart_dim(3)))
    vec, res, iters, h_own, cache, ok = eq.frozen_newton_batch(
        spec, d_mats, init=init, mask=mask)
    assert vec.shape == (4, sg.chart_dim(3))
    # masked-out entries are left at their initialization
    assert np.allclose(vec[1], 0.0)
    assert np.allclose(vec[3], 0.0)
    assert res[0] < 1e-12 and res[2] < 1e-12


def test_masked_solve_flags_singular_rows():
    h = np.stack([np.eye(2), np.zeros((2, 2)), 2 * np.eye(2)])
    f = np.ones((3, 2))
    active = np.array([True, True, True])
    step, bad = eq._masked_solve(h, f, active)
    assert not bad[0] and not bad[2]
    assert bad[1]
    assert np.allclose(step[0], 1.0)
    assert np.allclose(step[2], 0.5)
    assert np.all(np.isfinite(step))


def test_solver_raises_on_hopeless_statistic():
    spec = make_spec(7)
    with pytest.raises(NotConverged):
        eq.solve_frozen_target(spec, -10.0 * np.eye(3), max_iter=5)


def test_fixed_from_own_matches_chart_state():
    spec = make_spec(8)
    d_mat = sample_statistic(spec, 400)
    target = eq.solve_frozen_target(spec, d_mat)
    vec = target.theta.to_vector()
    state = eq.chart_state(spec, vec, d_mat)
    h_state = eq.hessian_fixed(state, spec)
    assert np.linalg.norm(h_state - target.hessian) < 1e-9 * np.linalg.norm(
        target.hessian)


def test_batch_constants_sandwich():
    spec = make_spec(9)
    consts = eq.batch_constants(spec)
    # at zero regularizer the CLT covariance collapses to the inverse Fisher
    assert consts.sandwich_gap < 1e-8
    fd_gap = np.linalg.norm(consts.v_star - consts.v_star_fd)
    assert fd_gap < 1e-3 * np.linalg.norm(consts.v_star)
    assert consts.trace_inv_fisher > 0
    assert abs(consts.trace_v_star - consts.trace_inv_fisher) < \
        1e-6 * consts.trace_inv_fisher


def test_sym_basis_orthonormal():
    basis = eq.sym_basis(4)
    gram = np.einsum("aij,bij->ab", basis, basis)
    assert np.linalg.norm(gram - np.eye(basis.shape[0])) < 1e-12
