"""Frozen equilibria of the compressed objective and their response to data.

For a frozen statistic D the target is the chart point where the gradient of
the compressed objective vanishes.  The solver works in the fixed chart based
at Sigma*: the own-frame gradient of :mod:`eqtrack.gaussian_model` is pulled
back through the differential of the rotation coordinate (a ``phi(ad_Theta)``
series), so the zero found is the exact chart representation of the branch.

The response operator solves ``J a = -B[delta D]`` at a converged target and
is the exact derivative of the branch in the fixed chart.
"""

from dataclasses import dataclass

import numpy as np

from . import gaussian_model as gm
from . import sym_geometry as sg
from .errors import ChartDomainExceeded, DegenerateSpectrum, NotConverged
from .sym_geometry import ChartPoint

# Spectral offsets beyond this leave any reasonable chart neighborhood and
# only arise when a solve diverges.
X_LIMIT = 8.0

# Newton step length cap (chart norm) for cold starts.
MAX_STEP = 1.5

# Rotation norm above which a converged solution is re-expressed through the
# chart logarithm; the chart covers each SPD matrix by several rotational
# representatives and cold starts can land on a distant one.
ROT_CANON = 1.0


def frame_arrays(spec, x, th):
    """Eigenframe (q, lam) of the chart point, batched over leading axes."""
    rot = sg.so_expm(-th)
    q = spec.base.vectors @ rot
    lam = spec.base.values * np.exp(x)
    return q, lam


@dataclass
class FixedChartState:
    """Evaluation state at one chart point (batched): frame, cache, transition."""

    x: np.ndarray
    th: np.ndarray
    cache: gm.PointCache
    phi: np.ndarray   # matrix of phi(ad_Theta) on rotational coordinates


def chart_state(spec, vec, d_mat):
    x, th = sg.unpack_chart(vec, spec.d)
    q, lam = frame_arrays(spec, x, th)
    cache = gm.point_cache(spec, q, lam, d_mat)
    phi = sg.phi_matrix(th, sign=1.0)
    return FixedChartState(x=x, th=th, cache=cache, phi=phi)


def own_state(spec, vec, d_mat):
    """Point cache at a chart point without the rotation transition matrix."""
    x, th = sg.unpack_chart(vec, spec.d)
    q, lam = frame_arrays(spec, x, th)
    return gm.point_cache(spec, q, lam, d_mat)


def score_own(spec, cache):
    """Packed own-frame gradient (no chart transition applied)."""
    gx, gth = gm.grad_from_cache(spec, cache)
    return sg.pack_chart(gx, gth)


def fixed_from_own(spec, vec, h_own):
    """Fixed-chart Hessian and rotation transition at a chart point.

    Conjugates the own-frame Hessian by P = blockdiag(I, Phi(ad_Theta));
    returns (hessian, phi).
    """
    d = spec.d
    _, th = sg.unpack_chart(np.asarray(vec, dtype=float), d)
    phi = sg.phi_matrix(th, sign=1.0)
    h = h_own.copy()
    h[..., d:, :] = np.einsum("...ji,...jk->...ik", phi, h_own[..., d:, :])
    h[..., :, d:] = np.einsum("...ij,...jk->...ik", h[..., :, d:], phi)
    return sg.sym_part(h), phi


def score_fixed(state, spec):
    """Packed fixed-chart gradient at the state."""
    gx, gth = gm.grad_from_cache(spec, state.cache)
    vec = sg.pack_chart(gx, gth)
    d = spec.d
    out = vec.copy()
    out[..., d:] = np.einsum("...ji,...j->...i", state.phi, vec[..., d:])
    return out


def hessian_fixed(state, spec):
    """Dense fixed-chart Hessian P^T H_loc P with P = blockdiag(I, Phi)."""
    h_loc = gm.hessian_matrix_local(spec, state.cache)
    d = spec.d
    h = h_loc.copy()
    h[..., d:, :] = np.einsum("...ji,...jk->...ik", state.phi, h_loc[..., d:, :])
    h[..., :, d:] = np.einsum("...ij,...jk->...ik", h[..., :, d:], state.phi)
    return sg.sym_part(h)


def dstat_fixed(state, spec, delta_d):
    """Packed fixed-chart derivative of the score in the statistic."""
    bx, bth = gm.dstat_from_cache(spec, state.cache, delta_d)
    vec = sg.pack_chart(bx, bth)
    d = spec.d
    out = vec.copy()
    out[..., d:] = np.einsum("...ji,...j->...i", state.phi, vec[..., d:])
    return out


def _score_norm(vec):
    return np.sqrt(np.sum(vec ** 2, axis=-1))


def _masked_solve(h, f, active):
    """Batched Newton solve robust to inactive or degenerate entries.

    Entries outside ``active`` (and entries with non-finite or singular
    systems) are replaced by the identity so one bad replicate cannot abort
    the whole batch; those degenerate-but-active entries come back flagged.
    """
    n = h.shape[-1]
    eye = np.eye(n)
    finite = np.isfinite(h).all(axis=(-1, -2)) & np.isfinite(f).all(axis=-1)
    use = active & finite
    h_use = np.where(use[..., None, None], h, eye)
    f_use = np.where(use[..., None], f, 0.0)
    det = np.abs(np.linalg.det(h_use))
    sing = det < 1e-300
    h_use = np.where(sing[..., None, None], eye, h_use)
    step = np.linalg.solve(h_use, f_use[..., None])[..., 0]
    bad = active & (~finite | sing | ~np.isfinite(step).all(axis=-1))
    return step, bad


def _em_fixed_point(spec, d_rows, max_iter=400, tol=1e-11):
    """Monotone fixed-point iteration Sigma <- A(Sigma; D), batched rows.

    The lift map decreases the objective at every step, so unlike Newton it
    cannot stall on the tied-spectrum set where the rotational gradient
    vanishes without the point being a minimizer.
    """
    sig = np.broadcast_to(spec.sigma_star, d_rows.shape).copy()
    for _ in range(max_iter):
        new = sg.sym_part(gm.latent_lift(spec, sig, d_rows))
        gap = np.max(np.abs(new - sig), axis=(-1, -2))
        sig = new
        if not np.any(np.isfinite(gap) & (gap > tol)):
            break
    return sig


def _em_chart_init(spec, d_rows):
    """Chart coordinates of the EM fixed points; flags rows the chart covers."""
    sig = _em_fixed_point(spec, d_rows)
    n = sg.chart_dim(spec.d)
    vecs = np.zeros((sig.shape[0], n))
    good = np.zeros(sig.shape[0], dtype=bool)
    for k in range(sig.shape[0]):
        if not np.all(np.isfinite(sig[k])):
            continue
        try:
            vecs[k] = sg.chart_log(spec.base, sig[k]).to_vector()
            good[k] = True
        except (ChartDomainExceeded, DegenerateSpectrum):
            pass
    return vecs, good


def frozen_newton_batch(spec, d_mat, init=None, tol=1e-12, max_iter=50,
                        max_halvings=6, mask=None, rescue=True):
    """Newton solve of the frozen score over leading batch axes.

    Score and Hessian are evaluated in the own eigenframe (criticality does
    not depend on the chart transition); the Newton direction is mapped into
    fixed-chart coordinates through the inverse rotation transition, which
    reproduces the conjugated-system step exactly.  Returns (vec, residual,
    iterations, h_own, cache, ok) where ``h_own`` and ``cache`` are the
    own-frame Hessian and point cache at the returned point; failed entries
    are flagged in ``ok`` and carry their last state.
    """
    d = spec.d
    n = sg.chart_dim(d)
    d_arr = np.asarray(d_mat, dtype=float)
    batch = d_arr.shape[:-2]
    r = int(np.prod(batch, dtype=int))
    d_flat = d_arr.reshape((r, d, d))
    if init is None:
        vec = np.zeros((r, n))
    else:
        vec = np.array(init, dtype=float, copy=True).reshape((r, n))
    cache = own_state(spec, vec, d_flat)
    f = score_own(spec, cache)
    res = _score_norm(f)
    active = res > tol
    bad = ~np.isfinite(res)
    active &= ~bad
    if mask is not None:
        # rows the caller no longer needs are left at their initial state
        active &= np.asarray(mask, dtype=bool).reshape(r)
    iters = np.zeros(r, dtype=int)
    it = 0
    # the loop gathers the still-active rows so stragglers iterate on a
    # shrinking subset instead of dragging the full batch along
    while np.any(active) and it < max_iter:
        it += 1
        idx = np.flatnonzero(active)
        s_vec = vec[idx]
        s_d = d_flat[idx]
        s_f = f[idx]
        s_res = res[idx]
        hess = gm.hessian_matrix_local(spec, gm.index_cache(cache, idx))
        live = np.ones(idx.size, dtype=bool)
        step, sbad = _masked_solve(hess, s_f, live)
        # rotation part of the step moves fixed-chart coordinates
        _, th = sg.unpack_chart(s_vec, d)
        phi = sg.phi_matrix(th, sign=1.0)
        rot_step, pbad = _masked_solve(phi, step[..., d:], live)
        step = np.concatenate([step[..., :d], rot_step], axis=-1)
        sbad |= pbad
        live &= ~sbad
        # trust-region style cap keeps cold starts from overshooting the chart
        slen = _score_norm(step)
        cap = np.minimum(1.0, MAX_STEP / np.maximum(slen, 1e-300))
        step = step * cap[..., None]
        new_vec = np.where(live[..., None], s_vec - step, s_vec)
        # keep spectral offsets in a sane range to avoid overflow on divergence
        blow = live & (np.max(np.abs(new_vec[..., :d]), axis=-1) > X_LIMIT)
        new_vec = np.where(blow[..., None], s_vec, new_vec)
        sbad |= blow
        live &= ~blow
        new_cache = own_state(spec, new_vec, s_d)
        new_f = score_own(spec, new_cache)
        new_res = _score_norm(new_f)
        worse = live & ~(new_res <= s_res)
        shrink = 0.5
        halved = np.zeros(idx.size, dtype=bool)
        for _ in range(max_halvings):
            w = np.flatnonzero(worse)
            if w.size == 0:
                break
            try_vec = s_vec[w] - shrink * step[w]
            try_f = score_own(spec, own_state(spec, try_vec, s_d[w]))
            try_res = _score_norm(try_f)
            took = try_res <= s_res[w]
            tw = w[took]
            new_vec[tw] = try_vec[took]
            new_f[tw] = try_f[took]
            new_res[tw] = try_res[took]
            halved[tw] = True
            worse[tw] = False
            shrink *= 0.5
        # entries that could not decrease even with damping take the full
        # step anyway; Newton close to the target can raise the residual
        # norm transiently without diverging
        if np.any(halved):
            hw = np.flatnonzero(halved)
            gm.scatter_cache(new_cache, hw,
                             own_state(spec, new_vec[hw], s_d[hw]))
        keep = live[..., None]
        vec[idx] = np.where(keep, new_vec, s_vec)
        f[idx] = np.where(keep, new_f, s_f)
        res[idx] = np.where(live, new_res, s_res)
        iters[idx] += 1
        gm.scatter_cache(cache, idx[live], gm.index_cache(new_cache, np.flatnonzero(live)))
        nan = live & ~np.isfinite(new_res)
        sbad |= nan
        live &= ~nan
        bad[idx] |= sbad
        active[idx] = live & (new_res > tol)
    hess = gm.hessian_matrix_local(spec, cache)
    ok = ~(bad | (res > tol) | ~np.isfinite(res))
    if rescue:
        # converged points with an indefinite Hessian are saddles on the
        # tied-spectrum set, where the rotational gradient vanishes without
        # the point being a minimizer; treat them like failed rows and retry
        # from the fixed-point iteration, which cannot land there
        finite_h = np.isfinite(hess).all(axis=(-1, -2))
        heig_min = np.full(r, np.inf)
        some = np.flatnonzero(ok & finite_h)
        if some.size:
            heig_min[some] = np.linalg.eigvalsh(hess[some])[..., 0]
        saddle = ok & (heig_min <= 1e-10)
        need = ~ok | saddle
        if mask is not None:
            need &= np.asarray(mask, dtype=bool).reshape(r)
        ok[saddle] = False
        idx = np.flatnonzero(need)
        if idx.size:
            init2, good = _em_chart_init(spec, d_flat[idx])
            sub = idx[good]
            if sub.size:
                r_vec, r_res, r_it, r_h, r_cache, r_ok = frozen_newton_batch(
                    spec, d_flat[sub], init=init2[good], tol=tol,
                    max_iter=max_iter, max_halvings=max_halvings,
                    rescue=False)
                r_heig = np.where(
                    r_ok & np.isfinite(r_h).all(axis=(-1, -2)),
                    np.linalg.eigvalsh(np.where(
                        np.isfinite(r_h), r_h, 0.0))[..., 0], -np.inf)
                accept = np.flatnonzero(r_ok & (r_heig > 1e-10))
                tgt = sub[accept]
                vec[tgt] = r_vec[accept]
                res[tgt] = r_res[accept]
                iters[tgt] += r_it[accept]
                hess[tgt] = r_h[accept]
                gm.scatter_cache(cache, tgt, gm.index_cache(r_cache, accept))
                ok[tgt] = True
        # replace far rotational representatives by the principal one; the
        # chart is many-to-one in the rotation and downstream guards assume
        # the minimal representative
        far = ok & (np.sqrt(np.sum(vec[:, d:] ** 2, axis=-1)) > ROT_CANON)
        for k in np.flatnonzero(far):
            point = ChartPoint.from_vector(vec[k], d)
            try:
                canon = sg.chart_log(spec.base, sg.chart_exp(spec.base, point))
            except (ChartDomainExceeded, DegenerateSpectrum):
                continue
            cvec = canon.to_vector()
            if np.linalg.norm(cvec[d:]) >= np.linalg.norm(vec[k][d:]) - 1e-12:
                continue
            c_cache = own_state(spec, cvec[None], d_flat[k][None])
            c_res = _score_norm(score_own(spec, c_cache))[0]
            if c_res <= tol:
                vec[k] = cvec
                res[k] = c_res
                hess[k] = gm.hessian_matrix_local(spec, c_cache)[0]
                gm.scatter_cache(cache, np.array([k]),
                                 gm.index_cache(c_cache, np.array([0])))
    return (vec.reshape(batch + (n,)), res.reshape(batch), iters.reshape(batch),
            hess.reshape(batch + (n, n)), gm.reshape_cache(cache, batch),
            ok.reshape(batch))


@dataclass
class FrozenTarget:
    """Converged frozen equilibrium for a fixed statistic."""

    theta: ChartPoint
    residual: float
    iterations: int
    hessian: np.ndarray  # fixed-chart Hessian at the target
    d_mat: np.ndarray
    cache: gm.PointCache
    phi: np.ndarray      # rotation transition at the target


def solve_frozen_target(spec, d_mat, init=None, tol=1e-12, max_iter=50):
    """Solve for the frozen target of one statistic; raises on failure."""
    init_vec = init.to_vector() if isinstance(init, ChartPoint) else init
    vec, res, iters, h_own, cache, ok = frozen_newton_batch(
        spec, d_mat, init=init_vec, tol=tol, max_iter=max_iter)
    if not bool(ok):
        raise NotConverged("frozen target solve failed",
                           residual=float(res), iterations=int(iters))
    hess, phi = fixed_from_own(spec, vec, h_own)
    return FrozenTarget(theta=ChartPoint.from_vector(vec, spec.d),
                        residual=float(res), iterations=int(iters),
                        hessian=hess, d_mat=np.array(d_mat),
                        cache=cache, phi=phi)


def response_apply(spec, target, delta_d):
    """First-order response of the frozen target to a statistic increment.

    Solves ``J a = -B[delta_d]`` with the fixed-chart Hessian and statistic
    derivative evaluated at the target.
    """
    d = spec.d
    bx, bth = gm.dstat_from_cache(spec, target.cache, delta_d)
    b = sg.pack_chart(bx, bth)
    b[..., d:] = np.einsum("...ji,...j->...i", target.phi, b[..., d:].copy())
    a = -np.linalg.solve(target.hessian, b)
    return ChartPoint.from_vector(a, spec.d)


def jet_remainder_probe(spec, d_prev, d_next, target_prev=None, tol=1e-12):
    """First-order Taylor remainder of the target map between two statistics.

    Returns (remainder, target_prev, target_next, response) where the
    remainder is r(D_next) - r(D_prev) - Dr(D_prev)[D_next - D_prev].
    """
    if target_prev is None:
        target_prev = solve_frozen_target(spec, d_prev, tol=tol)
    target_next = solve_frozen_target(spec, d_next, init=target_prev.theta, tol=tol)
    response = response_apply(spec, target_prev, d_next - d_prev)
    remainder = target_next.theta - target_prev.theta - response
    return remainder, target_prev, target_next, response


# ---------------------------------------------------------------------------
# population constants for the transfer experiment
# ---------------------------------------------------------------------------

def sym_basis(d):
    """Orthonormal basis of symmetric matrices: E_ii then sqrt(2)-scaled S_ij."""
    n = sg.chart_dim(d)
    basis = np.zeros((n, d, d))
    for i in range(d):
        basis[i, i, i] = 1.0
    iu, ju = np.triu_indices(d, k=1)
    for a, (i, j) in enumerate(zip(iu, ju)):
        basis[d + a, i, j] = basis[d + a, j, i] = 1.0 / np.sqrt(2.0)
    return basis


@dataclass
class BatchConstants:
    """Population quantities governing the batch estimator's fluctuations."""

    fisher: np.ndarray
    trace_inv_fisher: float
    v_star: np.ndarray        # sandwich covariance J^{-1} B Xi B^T J^{-1}
    trace_v_star: float
    v_star_fd: np.ndarray     # same sandwich with a finite-difference Jacobian
    sandwich_gap: float       # relative gap between v_star and inv(fisher)


def batch_constants(spec, fd_step=1e-6):
    """Assemble J*, the statistic covariance and the CLT covariance V*."""
    fisher = gm.fisher_matrix(spec)
    fisher_inv = np.linalg.inv(fisher)
    d = spec.d
    basis = sym_basis(d)
    m = basis.shape[0]
    # statistic covariance in the symmetric basis: 2 tr(P D* P' D*)
    pd = basis @ spec.d_star
    xi = 2.0 * np.einsum("aij,bji->ab", pd, pd)
    # statistic derivative of the score at the population point
    state = chart_state(spec, np.zeros(sg.chart_dim(d)), spec.d_star)
    b_cols = np.stack([dstat_fixed(state, spec, p) for p in basis], axis=-1)
    resp = -np.linalg.solve(fisher, b_cols)          # Dr(D*) columns
    v_star = resp @ xi @ resp.T
    # finite-difference Jacobian of the target map as an independent oracle
    cols = []
    for p in basis:
        tp = solve_frozen_target(spec, spec.d_star + fd_step * p)
        tm = solve_frozen_target(spec, spec.d_star - fd_step * p)
        cols.append((tp.theta.to_vector() - tm.theta.to_vector()) / (2 * fd_step))
    resp_fd = np.stack(cols, axis=-1)
    v_star_fd = resp_fd @ xi @ resp_fd.T
    gap = np.linalg.norm(v_star - fisher_inv) / np.linalg.norm(fisher_inv)
    return BatchConstants(
        fisher=fisher, trace_inv_fisher=float(np.trace(fisher_inv)),
        v_star=v_star, trace_v_star=float(np.trace(v_star)),
        v_star_fd=v_star_fd, sandwich_gap=float(gap))
