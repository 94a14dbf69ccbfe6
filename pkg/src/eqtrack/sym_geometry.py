"""Spectral-rotational chart on symmetric positive definite matrices.

A covariance matrix near a base point ``Sigma = Q diag(lam) Q^T`` is
parametrised by log-eigenvalue offsets ``x`` and a rotation generator
``Theta`` (antisymmetric), via

    Sigma(x, Theta) = Q exp(-Theta) diag(lam * exp(x)) exp(Theta) Q^T.

The chart norm is ``||(x, Theta)||^2 = sum x_i^2 + 2 sum_{i<j} Theta_ij^2``,
which coincides with ``||x||^2 + ||Theta||_F^2``.

Most helpers broadcast over leading batch axes; the dataclasses are the
single-instance API used by the tracker and the tests.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg

from .errors import ChartDomainExceeded, DegenerateSpectrum

# Relative eigengap below which the rotational coordinate is ill defined.
GAP_RTOL = 1e-10

# Largest rotation angle (spectral norm of Theta) the chart accepts.
MAX_ROTATION = 0.5 * np.pi


def sym_part(m):
    """Symmetric part, batched over leading axes."""
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def require_symmetric(m, tol=1e-10):
    m = np.asarray(m, dtype=float)
    if m.shape[-1] != m.shape[-2]:
        raise ValueError("expected a square matrix")
    dev = np.max(np.abs(m - np.swapaxes(m, -1, -2)))
    scale = max(np.max(np.abs(m)), 1.0)
    if dev > tol * scale:
        raise ValueError(f"matrix not symmetric: deviation {dev:.3e}")
    return sym_part(m)


def require_spd(m, tol=1e-12):
    """Validate symmetry and positive definiteness; returns the symmetrized matrix."""
    m = require_symmetric(m)
    w = np.linalg.eigvalsh(m)
    if np.min(w) <= tol * max(np.max(np.abs(w)), 1.0):
        raise ValueError(f"matrix not positive definite: min eigenvalue {np.min(w):.3e}")
    return m


@dataclass
class SpectralDecomp:
    """Eigendecomposition with descending eigenvalues and canonical signs."""

    vectors: np.ndarray  # (d, d), columns are eigenvectors
    values: np.ndarray   # (d,), strictly decreasing

    @property
    def dim(self):
        return self.values.shape[0]

    def matrix(self):
        return (self.vectors * self.values) @ self.vectors.T

    def min_gap(self):
        return np.min(np.abs(np.diff(self.values)))


def eig_simple(m, gap_rtol=GAP_RTOL):
    """Eigendecompose a symmetric matrix, requiring a simple spectrum.

    Eigenvalues are sorted descending and each eigenvector's sign is fixed
    so that its largest-magnitude entry is positive.
    """
    m = sym_part(np.asarray(m, dtype=float))
    w, v = np.linalg.eigh(m)
    w = w[::-1]
    v = v[:, ::-1]
    lead = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[lead, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    v = v * signs
    gaps = -np.diff(w)
    if np.any(gaps <= gap_rtol * max(abs(w[0]), 1e-300)):
        raise DegenerateSpectrum(
            f"eigengap {np.min(gaps):.3e} below threshold for values {w}")
    return SpectralDecomp(vectors=np.ascontiguousarray(v), values=w.copy())


@dataclass
class ChartPoint:
    """Chart coordinates: spectral offsets x and rotation generator Theta."""

    x: np.ndarray      # (d,)
    theta: np.ndarray  # (d, d), antisymmetric

    @property
    def dim(self):
        return self.x.shape[0]

    @classmethod
    def zero(cls, d):
        return cls(x=np.zeros(d), theta=np.zeros((d, d)))

    def norm(self):
        return float(np.sqrt(np.sum(self.x ** 2) + np.sum(self.theta ** 2)))

    def __add__(self, other):
        return ChartPoint(self.x + other.x, self.theta + other.theta)

    def __sub__(self, other):
        return ChartPoint(self.x - other.x, self.theta - other.theta)

    def scale(self, c):
        return ChartPoint(c * self.x, c * self.theta)

    def to_vector(self):
        return pack_chart(self.x, self.theta)

    @classmethod
    def from_vector(cls, vec, d):
        x, theta = unpack_chart(np.asarray(vec, dtype=float), d)
        return cls(x=x, theta=theta)


# The gradient of the compressed objective has the same (x, Theta) block
# structure and the same norm as a chart point, so one container serves both.
ChartGradient = ChartPoint


@dataclass
class TangentCoords:
    """Spectral/rotational coordinates (a, K) of a symmetric tangent vector."""

    a: np.ndarray  # (d,)
    k: np.ndarray  # (d, d), antisymmetric

    def norm(self):
        return float(np.sqrt(np.sum(self.a ** 2) + np.sum(self.k ** 2)))


def chart_dim(d):
    """Number of free chart coordinates for d-by-d matrices."""
    return d + d * (d - 1) // 2


@lru_cache(maxsize=None)
def _tri_indices(d):
    return np.triu_indices(d, k=1)


def pack_chart(x, theta):
    """Flatten (x, Theta) into orthonormal coordinates, batched.

    The rotational entries are scaled by sqrt(2) so the Euclidean norm of the
    output equals the chart norm.
    """
    iu, ju = _tri_indices(x.shape[-1])
    return np.concatenate([x, np.sqrt(2.0) * theta[..., iu, ju]], axis=-1)


def unpack_chart(vec, d):
    """Inverse of pack_chart; returns (x, Theta) with Theta antisymmetric."""
    x = vec[..., :d]
    iu, ju = _tri_indices(d)
    theta = np.zeros(vec.shape[:-1] + (d, d), dtype=float)
    vals = vec[..., d:] / np.sqrt(2.0)
    theta[..., iu, ju] = vals
    theta[..., ju, iu] = -vals
    return x, theta


def theta_basis(d):
    """Orthonormal basis of antisymmetric generators, shape (n_rot, d, d)."""
    iu, ju = _tri_indices(d)
    n = iu.shape[0]
    basis = np.zeros((n, d, d))
    basis[np.arange(n), iu, ju] = 1.0 / np.sqrt(2.0)
    basis[np.arange(n), ju, iu] = -1.0 / np.sqrt(2.0)
    return basis


def tangent_decompose(decomp, u):
    """Coordinates of a symmetric ambient tangent vector at the decomposition.

    With ``Utilde = Q^T U Q``: ``a_i = Utilde_ii / lam_i`` and
    ``K_ij = Utilde_ij / (lam_j - lam_i)`` off the diagonal.
    """
    q, lam = decomp.vectors, decomp.values
    ut = q.T @ sym_part(u) @ q
    a = np.diag(ut) / lam
    denom = lam[None, :] - lam[:, None]
    np.fill_diagonal(denom, 1.0)
    k = ut / denom
    np.fill_diagonal(k, 0.0)
    return TangentCoords(a=a, k=k)


def tangent_reconstruct(decomp, coords):
    """Rebuild the ambient tangent vector: U = Q(diag(lam a) + [K, Lam])Q^T."""
    q, lam = decomp.vectors, decomp.values
    inner = np.diag(lam * coords.a) + coords.k * lam[None, :] - lam[:, None] * coords.k
    return q @ inner @ q.T


def chart_norm_constants(lam):
    """Frobenius-vs-chart norm sandwich constants (gamma_lo, gamma_hi).

    For U with coordinates (a, K): ``gamma_lo ||(a,K)||^2 <= ||U||_F^2 <=
    gamma_hi ||(a,K)||^2`` with gamma_lo the smaller of the squared smallest
    eigenvalue and squared minimal gap, gamma_hi the squared largest eigenvalue.
    """
    lam = np.asarray(lam, dtype=float)
    gaps = np.abs(lam[:, None] - lam[None, :])[np.triu_indices(lam.size, k=1)]
    min_gap = np.min(gaps) if gaps.size else np.inf
    gamma_lo = min(np.min(lam) ** 2, min_gap ** 2)
    gamma_hi = np.max(lam) ** 2
    return float(gamma_lo), float(gamma_hi)


def so_expm(theta):
    """Matrix exponential of antisymmetric generators, batched.

    Uses scaling-and-squaring with a truncated Taylor series; accurate to
    machine precision for the moderate rotation angles the chart allows.
    """
    theta = np.asarray(theta, dtype=float)
    nrm = np.max(np.sqrt(np.sum(theta ** 2, axis=(-1, -2)))) if theta.size else 0.0
    squarings = max(0, int(np.ceil(np.log2(max(nrm, 1e-300) / 0.5)))) if nrm > 0.5 else 0
    a = theta / (2.0 ** squarings)
    d = theta.shape[-1]
    eye = np.broadcast_to(np.eye(d), theta.shape).copy()
    out = eye.copy()
    term = eye
    for k in range(1, 24):
        term = term @ a / k
        out = out + term
        if np.max(np.abs(term)) < 1e-18:
            break
    for _ in range(squarings):
        out = out @ out
    return out


def so_logm(o):
    """Principal logarithm of a single rotation matrix, returned antisymmetric."""
    l = scipy.linalg.logm(o)
    if np.max(np.abs(l.imag)) > 1e-8:
        raise ChartDomainExceeded("rotation logarithm is not real")
    l = l.real
    return 0.5 * (l - l.T)


def rotation_angle(theta):
    """Largest rotation angle (spectral norm) of an antisymmetric generator."""
    return float(np.linalg.norm(theta, ord=2)) if theta.size else 0.0


def chart_exp(base, point):
    """Map chart coordinates at the base decomposition to an SPD matrix."""
    q, lam = base.vectors, base.values
    e = so_expm(-point.theta)
    qrot = q @ e
    return (qrot * (lam * np.exp(point.x))) @ qrot.T


def chart_log(base, sigma, max_rotation=MAX_ROTATION):
    """Chart coordinates of an SPD matrix relative to the base decomposition.

    Eigenvalues are matched to the base by descending order and eigenvector
    signs are fixed against the base frame.  Raises ChartDomainExceeded when
    the sign matching is ambiguous or the rotation angle reaches pi/2.
    """
    dec = eig_simple(sigma)
    q, lam = dec.vectors, dec.values
    rel = base.vectors.T @ q
    diag = np.diag(rel).copy()
    if np.any(np.abs(diag) < 1e-8):
        raise ChartDomainExceeded("eigenvector matching is ambiguous")
    signs = np.sign(diag)
    rel = rel * signs
    # rel is exp(-Theta) up to floating point noise.
    theta = -so_logm(rel)
    angle = rotation_angle(theta)
    if angle >= max_rotation:
        raise ChartDomainExceeded(f"rotation angle {angle:.3f} outside chart domain")
    x = np.log(lam / base.values)
    return ChartPoint(x=x, theta=theta)


def chart_distance(base, sigma):
    """Chart-norm distance from the base point to sigma."""
    return chart_log(base, sigma).norm()


def ad_apply(theta, m):
    """Commutator [Theta, M], batched."""
    return theta @ m - m @ theta


def phi_ad_apply(theta, m, sign=1.0, tol=1e-17):
    """Apply ``phi(sign * ad_Theta)`` with ``phi(z) = (e^z - 1)/z``, batched.

    This is the differential of the rotation chart: it converts increments of
    the fixed-chart generator into body-frame increments (sign +1) and its
    adjoint pulls gradients back (sign -1).
    """
    out = np.array(m, dtype=float, copy=True)
    term = m
    for k in range(1, 40):
        term = sign * ad_apply(theta, term) / (k + 1.0)
        out = out + term
        if np.max(np.abs(term)) < tol:
            break
    return out


@lru_cache(maxsize=None)
def _rot_structure(d):
    """Structure tensor S[c, a, b] = <E_a, [E_c, E_b]> of the rotation basis."""
    basis = theta_basis(d)
    comm = np.einsum("cij,bjk->cbik", basis, basis) \
        - np.einsum("bij,cjk->cbik", basis, basis)
    return np.einsum("aik,cbik->cab", basis, comm)


def phi_matrix(theta, sign=1.0):
    """Dense matrix of ``phi(sign * ad_Theta)`` in orthonormal rotational coords.

    theta may carry leading batch axes; the result has shape
    (..., n_rot, n_rot) acting on packed rotational coordinates.  The series
    for phi runs on the adjoint matrix directly, with one halving/doubling
    pass (phi(2A) = (exp(A) + I) phi(A) / 2) to keep the term count short.
    """
    theta = np.asarray(theta, dtype=float)
    d = theta.shape[-1]
    iu, ju = _tri_indices(d)
    t = np.sqrt(2.0) * theta[..., iu, ju]
    a = sign * np.einsum("...c,cab->...ab", t, _rot_structure(d))
    # spectral norm of ad_Theta is at most 2 ||Theta||_F
    nrm = 2.0 * float(np.max(np.sqrt(np.sum(t ** 2, axis=-1)))) if t.size else 0.0
    squarings = max(0, int(np.ceil(np.log2(max(nrm, 1e-300) / 0.5)))) if nrm > 0.5 else 0
    b = a / (2.0 ** squarings)
    n = a.shape[-1]
    eye = np.broadcast_to(np.eye(n), b.shape).copy()
    expb = eye.copy()
    phi = eye.copy()
    term = eye
    for k in range(1, 30):
        term = term @ b / k
        expb = expb + term
        phi = phi + term / (k + 1.0)
        if np.max(np.abs(term)) < 1e-17:
            break
    for _ in range(squarings):
        phi = 0.5 * (expb + eye) @ phi
        expb = expb @ expb
    return phi
