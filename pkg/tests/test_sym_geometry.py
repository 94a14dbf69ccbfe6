"""Chart geometry: round trips, rotation maps, norm equivalence."""

import numpy as np
import pytest

from eqtrack import sym_geometry as sg
from eqtrack.errors import ChartDomainExceeded, DegenerateSpectrum
from eqtrack.sym_geometry import ChartPoint


def rand_spd(rng, d, spread=1.0):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    lam = np.exp(spread * rng.standard_normal(d))
    lam = np.sort(lam)[::-1]
    lam *= 1 + 0.05 * np.arange(d)[::-1]  # keep gaps open
    return (q * lam) @ q.T


def test_eig_simple_orders_descending():
    rng = np.random.default_rng(0)
    for _ in range(20):
        m = rand_spd(rng, 4)
        dec = sg.eig_simple(m)
        assert np.all(np.diff(dec.values) < 0)
        recon = (dec.vectors * dec.values) @ dec.vectors.T
        assert np.linalg.norm(recon - m) < 1e-10 * np.linalg.norm(m)


def test_eig_simple_rejects_tied_spectrum():
    with pytest.raises(DegenerateSpectrum):
        sg.eig_simple(np.eye(3))


def test_pack_unpack_round_trip():
    rng = np.random.default_rng(1)
    for d in (2, 3, 5):
        x = rng.standard_normal(d)
        theta = rng.standard_normal((d, d))
        theta = theta - theta.T
        vec = sg.pack_chart(x, theta)
        assert vec.shape == (sg.chart_dim(d),)
        x2, th2 = sg.unpack_chart(vec, d)
        assert np.allclose(x, x2)
        assert np.allclose(theta, th2)
        # packed norm matches the chart norm ||x||^2 + ||Theta||_F^2
        assert np.isclose(vec @ vec, x @ x + np.sum(theta ** 2))


def test_so_expm_is_orthogonal():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a = rng.standard_normal((4, 4))
        theta = a - a.T
        o = sg.so_expm(theta)
        assert np.linalg.norm(o @ o.T - np.eye(4)) < 1e-12
        assert np.isclose(np.linalg.det(o), 1.0)


def test_so_logm_inverts_expm():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = 0.4 * rng.standard_normal((3, 3))
        theta = a - a.T
        back = sg.so_logm(sg.so_expm(theta))
        assert np.linalg.norm(back - theta) < 1e-10


def test_chart_exp_log_round_trip():
    rng = np.random.default_rng(4)
    for _ in range(20):
        base = sg.eig_simple(rand_spd(rng, 3))
        # stay inside the injectivity domain of the chart
        vec = rng.standard_normal(sg.chart_dim(3))
        vec *= 0.25 / np.linalg.norm(vec)
        point = ChartPoint.from_vector(vec, 3)
        sigma = sg.chart_exp(base, point)
        back = sg.chart_log(base, sigma)
        assert np.linalg.norm(back.to_vector() - vec) < 1e-10


def test_chart_exp_inverts_log():
    rng = np.random.default_rng(40)
    for _ in range(20):
        base = sg.eig_simple(rand_spd(rng, 3))
        sigma = rand_spd(rng, 3, spread=0.3)
        try:
            point = sg.chart_log(base, sigma)
        except (ChartDomainExceeded, DegenerateSpectrum):
            continue
        recon = sg.chart_exp(base, point)
        assert np.linalg.norm(recon - sigma) < 1e-9 * np.linalg.norm(sigma)


def test_chart_log_rejects_large_rotation():
    rng = np.random.default_rng(5)
    base = sg.eig_simple(np.diag([3.0, 2.0, 1.0]))
    theta = np.zeros((3, 3))
    theta[0, 1] = 2.0
    theta = theta - theta.T
    sigma = sg.chart_exp(base, ChartPoint(np.zeros(3), theta))
    with pytest.raises(ChartDomainExceeded):
        sg.chart_log(base, sigma, max_rotation=0.5)


def test_chart_distance_zero_at_base():
    base = sg.eig_simple(np.diag([3.0, 2.0, 1.0]))
    sigma = (base.vectors * base.values) @ base.vectors.T
    assert sg.chart_distance(base, sigma) < 1e-12


def test_frobenius_sandwich():
    # gamma_lo ||v|| <= ||Sigma(v) - Sigma*||_F <= gamma_hi ||v|| to first order
    rng = np.random.default_rng(6)
    for _ in range(10):
        base = sg.eig_simple(rand_spd(rng, 3))
        lo, hi = sg.chart_norm_constants(base.values)
        assert 0 < lo <= hi
        vec = rng.standard_normal(sg.chart_dim(3))
        vec *= 1e-5 / np.linalg.norm(vec)
        sigma = sg.chart_exp(base, ChartPoint.from_vector(vec, 3))
        sigma0 = (base.vectors * base.values) @ base.vectors.T
        fro = np.linalg.norm(sigma - sigma0)
        nrm = np.linalg.norm(vec)
        assert lo * nrm * (1 - 1e-3) <= fro <= hi * nrm * (1 + 1e-3)


def test_phi_matrix_matches_series_application():
    rng = np.random.default_rng(7)
    for d in (2, 3, 5):
        for scale in (1e-3, 0.3, 1.5):
            a = scale * rng.standard_normal((d, d))
            theta = a - a.T
            phi = sg.phi_matrix(theta)
            n_rot = sg.chart_dim(d) - d
            basis = sg.theta_basis(d)
            for _ in range(3):
                coeff = rng.standard_normal(n_rot)
                m = np.einsum("a,aij->ij", coeff, basis)
                direct = sg.phi_ad_apply(theta, m)
                via = np.einsum("ab,b->a", phi, coeff)
                m_via = np.einsum("a,aij->ij", via, basis)
                assert np.linalg.norm(m_via - direct) < 1e-7 * max(
                    np.linalg.norm(direct), 1.0)


def test_phi_matrix_identity_at_zero():
    for d in (2, 4):
        n_rot = sg.chart_dim(d) - d
        phi = sg.phi_matrix(np.zeros((d, d)))
        assert np.linalg.norm(phi - np.eye(n_rot)) < 1e-14


def test_ad_apply_matches_commutator():
    rng = np.random.default_rng(8)
    a = rng.standard_normal((3, 3))
    theta = a - a.T
    m = rng.standard_normal((3, 3))
    assert np.allclose(sg.ad_apply(theta, m), theta @ m - m @ theta)


def test_tangent_decompose_reconstruct():
    rng = np.random.default_rng(9)
    base = sg.eig_simple(rand_spd(rng, 3))
    u = sg.sym_part(rng.standard_normal((3, 3)))
    coords = sg.tangent_decompose(base, u)
    back = sg.tangent_reconstruct(base, coords)
    assert np.linalg.norm(back - u) < 1e-10
