"""Latent Gaussian covariance model with compressed streaming statistics.

Observations ``Y ~ N(0, K)`` with ``K = H Sigma H^T + R`` are compressed to
``z = W^T Y`` with ``W = R^{-1} H``; the running second moment
``D_t = (1/t) sum z_r z_r^T`` is the only statistic the estimator sees.
The negative log-likelihood in Sigma depends on the data through ``D`` alone,
and its chart gradient and Hessian-vector products are available in closed
form through the posterior lift ``A(Sigma; D)``.

All core routines broadcast over leading batch axes of ``(q, lam)``; the
public wrappers accept the dataclasses from :mod:`eqtrack.sym_geometry`.
"""

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import sym_geometry as sg
from .sym_geometry import ChartGradient, ChartPoint, SpectralDecomp


@dataclass
class ModelSpec:
    """Fixed model instance: loading matrix, noise covariance, true covariance."""

    h: np.ndarray          # (p, d) loading matrix
    r_noise: np.ndarray    # (p, p) observation noise covariance
    sigma_star: np.ndarray  # (d, d) true latent covariance
    rho: float = 0.0       # spectral regularizer weight

    # caches, filled in __post_init__
    w: np.ndarray = field(init=False)        # R^{-1} H
    g: np.ndarray = field(init=False)        # H^T R^{-1} H
    k_star: np.ndarray = field(init=False)   # population observation covariance
    k_chol: np.ndarray = field(init=False)   # Cholesky factor of k_star
    b_star: np.ndarray = field(init=False)   # H^T K*^{-1} H
    d_star: np.ndarray = field(init=False)   # population compressed statistic
    base: SpectralDecomp = field(init=False)  # chart base at Sigma*

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=float)
        self.r_noise = sg.require_spd(self.r_noise)
        self.sigma_star = sg.require_spd(self.sigma_star)
        self.w = np.linalg.solve(self.r_noise, self.h)
        self.g = self.h.T @ self.w
        self.k_star = self.h @ self.sigma_star @ self.h.T + self.r_noise
        self.k_chol = np.linalg.cholesky(self.k_star)
        self.b_star = self.h.T @ np.linalg.solve(self.k_star, self.h)
        self.d_star = self.g @ self.sigma_star @ self.g + self.g
        self.base = sg.eig_simple(self.sigma_star)

    @property
    def d(self):
        return self.h.shape[1]

    @property
    def p(self):
        return self.h.shape[0]


def default_eigenvalues(d):
    """Geometric eigenvalue profile used by the experiment protocols."""
    return 2.0 * 0.75 ** np.arange(d) + 0.2


def draw_model(d, p, seed, noise_var=0.5, eigenvalues=None, rho=0.0,
               min_singular=0.1, h_condition=None):
    """Draw a random model instance.

    H has iid standard normal entries, redrawn until its smallest singular
    value is at least ``min_singular``; R is isotropic with variance
    ``noise_var``; Sigma* has the fixed eigenvalue profile in a random
    orthogonal frame.  ``h_condition`` optionally rescales the singular values
    of H geometrically to a target condition number.
    """
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    while True:
        h = rng.standard_normal((p, d))
        if np.linalg.svd(h, compute_uv=False)[-1] >= min_singular:
            break
    if h_condition is not None:
        u, s, vt = np.linalg.svd(h, full_matrices=False)
        s_new = s[0] * h_condition ** (-np.arange(d) / (d - 1.0))
        h = (u * s_new) @ vt
    r_noise = noise_var * np.eye(p)
    lam = np.asarray(eigenvalues if eigenvalues is not None else default_eigenvalues(d), dtype=float)
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    sigma_star = (q * lam) @ q.T
    return ModelSpec(h=h, r_noise=r_noise, sigma_star=sigma_star, rho=rho)


# ---------------------------------------------------------------------------
# sampling and statistics
# ---------------------------------------------------------------------------

def sample_observation(spec, rng, size=None):
    """Draw observation(s) y ~ N(0, K*); shape (p,) or (size, p)."""
    shape = (spec.p,) if size is None else (size, spec.p)
    return rng.standard_normal(shape) @ spec.k_chol.T

def compress(spec, y):
    """Compressed sufficient increment z = W^T y."""
    return y @ spec.w

def update_statistic(d_prev, z, t):
    """Running second-moment update D_t = D_{t-1} + (z z^T - D_{t-1})/t."""
    return d_prev + (np.outer(z, z) - d_prev) / t

def statistic_map(spec, s_ambient):
    """Compression of an ambient second moment: pi(S) = W^T S W."""
    return spec.w.T @ s_ambient @ spec.w


# ---------------------------------------------------------------------------
# posterior lift and objective
# ---------------------------------------------------------------------------

def latent_lift(spec, sigma, d_mat):
    """A(Sigma; D) = C + C D C with C = (Sigma^{-1} + G)^{-1}."""
    sigma_inv = np.linalg.inv(sigma)
    c = np.linalg.inv(sigma_inv + spec.g)
    return c + c @ d_mat @ c

def ambient_lift(spec, sigma, s_ambient):
    """Posterior-moment form of the lift computed from the ambient statistic.

    Uses the observation-space route: C = Sigma - Sigma H^T K^{-1} H Sigma and
    gain M = Sigma H^T K^{-1}, giving A = C + M S M^T.
    """
    k = spec.h @ sigma @ spec.h.T + spec.r_noise
    gain = np.linalg.solve(k, spec.h @ sigma).T
    c = sigma - gain @ spec.h @ sigma
    return sg.sym_part(c + gain @ s_ambient @ gain.T)

def objective(spec, sigma, d_mat):
    """Compressed negative log-likelihood (up to a Sigma-independent constant).

    Equals 0.5*(logdet K_Sigma - tr(C_Sigma D)); its gradient in Sigma matches
    the full objective 0.5*(logdet K + tr(K^{-1} S)) whenever D = pi(S).
    """
    sigma_inv = np.linalg.inv(sigma)
    m = sigma_inv + spec.g
    c = np.linalg.inv(m)
    _, ld_m = np.linalg.slogdet(m)
    _, ld_sig = np.linalg.slogdet(sigma)
    _, ld_r = np.linalg.slogdet(spec.r_noise)
    logdet_k = ld_r + ld_m + ld_sig
    val = 0.5 * (logdet_k - np.sum(c * d_mat))
    if spec.rho:
        x = np.log(np.linalg.eigvalsh(sigma)[::-1] / spec.base.values)
        val += 0.5 * spec.rho * np.sum(x ** 2)
    return float(val)


# ---------------------------------------------------------------------------
# chart score, statistic derivative and Hessian products
#
# Everything below works in the eigenframe of the current point: for a point
# with decomposition (Q, lam) all model matrices are conjugated by Q once and
# the remaining algebra is elementwise or small matmuls, broadcastable over
# leading batch axes.
# ---------------------------------------------------------------------------

def _t(m):
    return np.swapaxes(m, -1, -2)

def _diag(m):
    return np.diagonal(m, axis1=-2, axis2=-1)


@dataclass
class PointCache:
    """Shared intermediates of score/Hessian evaluations at one point."""

    q: np.ndarray        # (..., d, d)
    lam: np.ndarray      # (..., d)
    c_t: np.ndarray      # (Lam^{-1} + Q^T G Q)^{-1}
    d_t: np.ndarray      # Q^T D Q
    a_t: np.ndarray      # lift in frame, C + C D C
    gamma_t: np.ndarray  # frame ambient gradient 0.5(Lam^{-1} - Lam^{-1} A Lam^{-1})
    dc_t: np.ndarray     # D C in frame
    cd_t: np.ndarray     # C D in frame
    lam_a_lam: np.ndarray  # Lam^{-1} A Lam^{-1}
    x_off: np.ndarray    # log(lam / lam*), for the regularizer


def reshape_cache(cache, batch):
    """Reshape the leading axis of every cache field to ``batch``."""
    kwargs = {}
    for f in dataclasses.fields(PointCache):
        a = getattr(cache, f.name)
        kwargs[f.name] = a.reshape(batch + a.shape[1:])
    return PointCache(**kwargs)


def index_cache(cache, idx):
    """Row-gathered copy of a batched point cache."""
    return PointCache(**{f.name: getattr(cache, f.name)[idx]
                         for f in dataclasses.fields(PointCache)})


def scatter_cache(cache, idx, sub):
    """Write the rows of ``sub`` into ``cache`` at positions ``idx`` in place."""
    for f in dataclasses.fields(PointCache):
        getattr(cache, f.name)[idx] = getattr(sub, f.name)


def merge_cache(keep, new, old):
    """Fieldwise blend of two point caches: ``keep`` selects the new entry."""
    keep = np.asarray(keep)
    kwargs = {}
    for f in dataclasses.fields(PointCache):
        a = getattr(new, f.name)
        b = getattr(old, f.name)
        mask = keep.reshape(keep.shape + (1,) * (a.ndim - keep.ndim))
        kwargs[f.name] = np.where(mask, a, b)
    return PointCache(**kwargs)


def point_cache(spec, q, lam, d_mat):
    lam = np.asarray(lam, dtype=float)
    li = 1.0 / lam
    g_t = _t(q) @ spec.g @ q
    c_t = np.linalg.inv(g_t + li[..., None] * np.eye(lam.shape[-1]))
    d_t = _t(q) @ d_mat @ q
    cd_t = c_t @ d_t
    dc_t = _t(cd_t)
    a_t = c_t + cd_t @ c_t
    lam_a_lam = li[..., :, None] * a_t * li[..., None, :]
    gamma_t = 0.5 * (li[..., :, None] * np.eye(lam.shape[-1]) - lam_a_lam)
    x_off = np.log(lam / spec.base.values)
    return PointCache(q=q, lam=lam, c_t=c_t, d_t=d_t, a_t=a_t, gamma_t=gamma_t,
                      dc_t=dc_t, cd_t=cd_t, lam_a_lam=lam_a_lam, x_off=x_off)


def _comm_scale(lam, m):
    """Elementwise commutator [Lam^{-1}, M]: entries (1/l_i - 1/l_j) M_ij."""
    li = 1.0 / lam
    return (li[..., :, None] - li[..., None, :]) * m

def _comm_lam(lam, m):
    """Elementwise commutator [Lam, M]: entries (l_i - l_j) M_ij."""
    return (lam[..., :, None] - lam[..., None, :]) * m


def grad_from_cache(spec, cache):
    """Chart gradient (gx, gtheta) in the point's own frame."""
    gx = 0.5 * (1.0 - _diag(cache.a_t) / cache.lam)
    gth = 0.5 * _comm_scale(cache.lam, cache.a_t)
    if spec.rho:
        gx = gx + spec.rho * cache.x_off
    return gx, gth


def dstat_from_cache(spec, cache, delta_d):
    """Derivative of the chart gradient in the statistic, applied to delta_d."""
    dd_t = _t(cache.q) @ delta_d @ cache.q
    db = cache.c_t @ dd_t @ cache.c_t
    gx = -0.5 * _diag(db) / cache.lam
    gth = 0.5 * _comm_scale(cache.lam, db)
    return gx, gth


def hvp_from_cache(spec, cache, ax, kth):
    """Local chart Hessian applied to the direction (ax, kth).

    ax is the spectral component, kth the antisymmetric rotational generator
    of the direction in the point's own chart; broadcasting applies.
    """
    lam, li = cache.lam, 1.0 / cache.lam
    eye = np.eye(lam.shape[-1])
    u_t =(lam * ax)[..., :, None] * eye + _comm_lam(lam, kth)
    ulu = li[..., :, None] * u_t * li[..., None, :]
    cdot = cache.c_t @ ulu @ cache.c_t
    adot = cdot + cdot @ cache.dc_t + cache.cd_t @ cdot
    # frame version of the ambient second derivative D_Sigma Gamma [U]
    p_t = 0.5 * (-ulu
                 + (ulu @ cache.a_t) * li[..., None, :]
                 - li[..., :, None] * adot * li[..., None, :]
                 + cache.lam_a_lam @ (u_t * li[..., None, :]))
    hx = lam * _diag(p_t)
    hth = _comm_lam(lam, sg.sym_part(p_t))
    # chart curvature terms proportional to the ambient gradient
    gam = cache.gamma_t
    m2 = kth @ gam - gam @ kth                   # [K, Gamma], symmetric
    hx = hx + _diag(gam) * lam * ax + lam * _diag(m2)
    n_mat = _comm_lam(lam, kth)                  # [Lam, K], symmetric
    la = lam * ax
    hth = hth + (la[..., :, None] - la[..., None, :]) * gam \
        + 0.5 * (n_mat @ gam - gam @ n_mat) \
        + 0.5 * _comm_lam(lam, m2)
    if spec.rho:
        hx = hx + spec.rho * ax
    hth = 0.5 * (hth - _t(hth))
    return hx, hth


def hessian_matrix_local(spec, cache):
    """Dense local chart Hessian, shape (..., n, n), by applying the HVP to a basis."""
    d = cache.lam.shape[-1]
    n = sg.chart_dim(d)
    basis = np.eye(n)
    ax, kth = sg.unpack_chart(basis, d)          # (n, d), (n, d, d)
    sub = PointCache(
        q=cache.q, lam=cache.lam[..., None, :],
        c_t=cache.c_t[..., None, :, :], d_t=cache.d_t[..., None, :, :],
        a_t=cache.a_t[..., None, :, :], gamma_t=cache.gamma_t[..., None, :, :],
        dc_t=cache.dc_t[..., None, :, :], cd_t=cache.cd_t[..., None, :, :],
        lam_a_lam=cache.lam_a_lam[..., None, :, :], x_off=cache.x_off[..., None, :])
    hx, hth = hvp_from_cache(spec, sub, ax, kth)
    rows = sg.pack_chart(hx, hth)                # (..., n, n): row j = H e_j
    return sg.sym_part(rows)


# public single-point wrappers -----------------------------------------------

def score_gradient(spec, decomp, d_mat):
    """Chart gradient of the compressed objective at the given decomposition."""
    cache = point_cache(spec, decomp.vectors, decomp.values, d_mat)
    gx, gth = grad_from_cache(spec, cache)
    return ChartGradient(x=gx, theta=gth)

def d_stat_derivative(spec, decomp, delta_d):
    """Directional derivative of the chart gradient in D along delta_d."""
    cache = point_cache(spec, decomp.vectors, decomp.values, np.zeros_like(delta_d))
    gx, gth = dstat_from_cache(spec, cache, delta_d)
    return ChartGradient(x=gx, theta=gth)

def hessian_vector_product(spec, decomp, d_mat, u):
    """Local chart Hessian at the decomposition applied to the chart direction u."""
    cache = point_cache(spec, decomp.vectors, decomp.values, d_mat)
    hx, hth = hvp_from_cache(spec, cache, u.x, u.theta)
    return ChartGradient(x=hx, theta=hth)

def gamma_ambient(spec, sigma, d_mat):
    """Ambient gradient matrix of the compressed objective at sigma."""
    sigma_inv = np.linalg.inv(sigma)
    a = latent_lift(spec, sigma, d_mat)
    return sg.sym_part(0.5 * (sigma_inv - sigma_inv @ a @ sigma_inv))


# ---------------------------------------------------------------------------
# Fisher information, curvature band, Monte Carlo identities
# ---------------------------------------------------------------------------

def fisher_quadratic(spec, u, v):
    """Population Fisher form I(U, V) = 0.5 tr(B* U B* V) on ambient directions."""
    return 0.5 * float(np.sum((spec.b_star @ u) * (spec.b_star @ v).T))


def fisher_matrix(spec):
    """Fisher information in orthonormal chart coordinates at Sigma*.

    Assembled from the closed-form spectral/rotational blocks with
    Gam = Q*^T B* Q*.
    """
    lam = spec.base.values
    d = lam.size
    gam = spec.base.vectors.T @ spec.b_star @ spec.base.vectors
    n = sg.chart_dim(d)
    iu, ju = np.triu_indices(d, k=1)
    fisher = np.zeros((n, n))
    # spectral-spectral block
    fisher[:d, :d] = 0.5 * np.outer(lam, lam) * gam ** 2
    # spectral-rotational block: unit rotational direction (i<j) lifts to
    # (lam_i - lam_j) * S_ij in the frame
    for a, (i, j) in enumerate(zip(iu, ju)):
        col = d + a
        coef = lam[i] - lam[j]
        fisher[:d, col] = 0.5 * lam * coef * np.sqrt(2.0) * gam[:, i] * gam[:, j]
        fisher[col, :d] = fisher[:d, col]
    # rotational-rotational block
    for a, (i, j) in enumerate(zip(iu, ju)):
        for b, (k, l) in enumerate(zip(iu, ju)):
            val = 0.5 * (lam[i] - lam[j]) * (lam[k] - lam[l]) * (
                gam[i, k] * gam[j, l] + gam[i, l] * gam[j, k])
            fisher[d + a, d + b] = val
    return fisher


@dataclass
class CurvatureBand:
    """Spectral bounds on the frozen chart Hessian near the population point."""

    mu: float
    l_big: float
    beta_min: float
    beta_max: float
    beta_min_coarse: float
    beta_max_coarse: float


def curvature_band(spec):
    """Strong-convexity and smoothness constants from the band of B*."""
    beta = np.linalg.eigvalsh(spec.b_star)
    beta_min, beta_max = float(beta[0]), float(beta[-1])
    gamma_lo, gamma_hi = sg.chart_norm_constants(spec.base.values)
    sv = np.linalg.svd(spec.h, compute_uv=False)
    lam_max = float(spec.base.values[0])
    r_eigs = np.linalg.eigvalsh(spec.r_noise)
    beta_min_coarse = sv[-1] ** 2 / (sv[0] ** 2 * lam_max + float(r_eigs[-1]))
    beta_max_coarse = sv[0] ** 2 / float(r_eigs[0])
    return CurvatureBand(
        mu=0.5 * beta_min ** 2 * gamma_lo,
        l_big=0.5 * beta_max ** 2 * gamma_hi,
        beta_min=beta_min, beta_max=beta_max,
        beta_min_coarse=float(beta_min_coarse), beta_max_coarse=float(beta_max_coarse))


def score_samples(spec, y, u):
    """One-sample score projections l_dot_U(y_r) for rows y_r of y."""
    c_u = np.linalg.solve(spec.k_chol, spec.h @ u @ spec.h.T)
    c_u = np.linalg.solve(spec.k_chol, c_u.T).T
    z = np.linalg.solve(spec.k_chol, y.T).T
    quad = np.einsum("ri,ij,rj->r", z, c_u, z)
    return 0.5 * np.trace(c_u) - 0.5 * quad


def isserlis_mc_check(spec, u, v, n, rng):
    """Monte Carlo covariance of score projections against the Fisher value.

    Returns (mc_estimate, exact, abs_error) for directions u, v.
    """
    y = sample_observation(spec, rng, size=n)
    su = score_samples(spec, y, u)
    sv_ = score_samples(spec, y, v)
    mc = float(np.mean(su * sv_) - np.mean(su) * np.mean(sv_))
    exact = fisher_quadratic(spec, u, v)
    return mc, exact, abs(mc - exact)


def wishart_second_moment(spec, t):
    """Exact E ||D_t - D*||_F^2 for the compressed statistic."""
    d_star = spec.d_star
    return (np.trace(d_star) ** 2 + np.sum(d_star ** 2)) / t


def wishart_entry_covariance(sigma, m):
    """Covariance tensor of Wishart sample-covariance entries at sample size m.

    Cov(C_ab, C_cd) = (Sigma_ac Sigma_bd + Sigma_ad Sigma_bc)/m, returned with
    index order (a, b, c, d).
    """
    s = np.asarray(sigma, dtype=float)
    return (np.einsum("ac,bd->abcd", s, s) + np.einsum("ad,bc->abcd", s, s)) / m
