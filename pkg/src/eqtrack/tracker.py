"""Online predictor-corrector tracking of the frozen equilibrium.

Each stream step updates the compressed statistic, extrapolates the iterate
with the equilibrium jet (order 0 or 1), and applies one corrector step.
``run_stream`` is the single-replicate interface; ``run_stream_batch`` runs
many replicates (and several method arms sharing one stream and one frozen
target solve per step) vectorized over a leading batch axis.
"""

from dataclasses import dataclass, field

import numpy as np

from . import equilibrium as eq
from . import gaussian_model as gm
from . import sym_geometry as sg
from .errors import CgStalled, RestartRejected
from .sym_geometry import ChartPoint

# chart guards: beyond these the iterate has left any usable neighborhood
GUARD_X = 3.0
GUARD_ROT = 0.5 * np.pi


@dataclass
class TrackerConfig:
    """Method parameters for one tracking run."""

    order: int = 1                 # predictor order: 0 or 1
    wrong_sign: bool = False       # flip the sign of the first-order term
    corrector: str = "newton_cg"   # oracle_linear | damped_newton | newton_cg
    q_linear: float = 0.7          # oracle linear contraction factor
    eta: float = 1.0               # corrector step size
    damping: float | None = None   # Levenberg damping; None -> certified mu
    tau: float | None = None       # CG inexactness; None -> certified bound
    cg_max: int | None = None      # CG iteration cap; None -> 10 * chart dim
    tube_radius: float = 0.5
    restart_frac: float = 0.5      # restart index t0 = ceil(frac * T)
    init: str = "linear_restart"   # linear_restart | oracle | tube_perturbation | random_far
    far_norm: float = 4.0          # chart norm of the random-far initialization
    perturb_frac: float = 0.25     # tube perturbation radius as fraction of tube
    solver_tol: float = 1e-12


def certified_parameters(band):
    """Step size, damping and CG inexactness with a certified contraction.

    With eta = 1 and damping mu the exact damped step contracts by at most
    3/4 on the tube; the inexactness budget 3 mu / (16 L) keeps the inexact
    step below 7/8.
    """
    return 1.0, band.mu, 3.0 * band.mu / (16.0 * band.l_big)


def resolve_config(cfg, band):
    """Fill certified defaults into a copy of the config."""
    eta, lam, tau = certified_parameters(band)
    out = TrackerConfig(**vars(cfg))
    if out.damping is None:
        out.damping = lam
    if out.tau is None:
        out.tau = tau
    return out


# ---------------------------------------------------------------------------
# linear restart certificate
# ---------------------------------------------------------------------------

def linear_restart_batch(spec, d_mat, gap_rtol=sg.GAP_RTOL):
    """Moment-matching restart Sigma_hat = G^{-1}(D - G)G^{-1}, batched.

    Returns (sigma_hat, rejected); rejected entries fail positivity or the
    eigengap requirement and are left as computed.
    """
    g_inv = np.linalg.inv(spec.g)
    sigma_hat = sg.sym_part(g_inv @ (d_mat - spec.g) @ g_inv)
    w = np.linalg.eigvalsh(sigma_hat)
    lam_max = np.max(np.abs(w), axis=-1)
    gaps = np.min(np.diff(w, axis=-1), axis=-1)
    rejected = (w[..., 0] <= 0) | (gaps <= gap_rtol * np.maximum(lam_max, 1e-300))
    return sigma_hat, rejected


def restart_linear(spec, d_mat):
    """Single-statistic restart; raises RestartRejected when the certificate fails."""
    sigma_hat, rejected = linear_restart_batch(spec, d_mat)
    if bool(rejected):
        raise RestartRejected("linear restart failed positivity or eigengap check")
    return sigma_hat


def spd_floor(sigma_hat, floor_frac=0.05):
    """Project a symmetric matrix to a usable SPD point by eigenvalue flooring.

    The floor is a fraction of a crude positive scale guess; tied floored
    eigenvalues are spread multiplicatively so the spectral chart applies.
    """
    sigma_hat = sg.sym_part(sigma_hat)
    w, v = np.linalg.eigh(sigma_hat)
    scale = max(float(np.trace(sigma_hat)) / sigma_hat.shape[-1], 1e-3)
    w = np.maximum(w, floor_frac * scale)
    for i in range(1, w.size):
        if w[i] <= w[i - 1] * (1 + 1e-6):
            w[i] = w[i - 1] * (1 + 1e-3)
    return (v * w) @ v.T


# ---------------------------------------------------------------------------
# single-step operations (single replicate)
# ---------------------------------------------------------------------------

def predict(spec, target_prev, theta, delta_d, cfg):
    """Jet extrapolation of the iterate for a statistic increment."""
    if cfg.order == 0:
        return ChartPoint(theta.x.copy(), theta.theta.copy())
    if cfg.order != 1:
        raise ValueError("predictor order must be 0 or 1")
    a = eq.response_apply(spec, target_prev, delta_d)
    return theta - a if cfg.wrong_sign else theta + a


def _cg(matvec, rhs, tol_abs, max_iter):
    """Plain conjugate gradient with absolute residual tolerance.

    Returns (solution, iterations); raises CgStalled on an indefinite
    direction or when the cap is reached without meeting the tolerance.
    """
    x = np.zeros_like(rhs)
    r = rhs.copy()
    rr = float(r @ r)
    if np.sqrt(rr) <= tol_abs:
        return x, 0
    p = r.copy()
    for k in range(1, max_iter + 1):
        hp = matvec(p)
        php = float(p @ hp)
        if php <= 0:
            raise CgStalled("non-positive curvature direction in CG")
        alpha = rr / php
        x = x + alpha * p
        r = r - alpha * hp
        rr_new = float(r @ r)
        if np.sqrt(rr_new) <= tol_abs:
            return x, k
        p = r + (rr_new / rr) * p
        rr = rr_new
    raise CgStalled("CG iteration cap reached")


def correct(spec, theta_tilde, d_mat, cfg, band=None, oracle_target=None):
    """One corrector application at the predicted point.

    Returns (theta_new, cg_iterations).  The oracle linear corrector needs
    the frozen target; the Newton correctors evaluate the fixed-chart score
    and (matrix-free for CG) Hessian at the predicted point.
    """
    if cfg.corrector == "oracle_linear":
        if oracle_target is None:
            oracle_target = eq.solve_frozen_target(spec, d_mat, tol=cfg.solver_tol)
        r_vec = oracle_target.theta.to_vector()
        v = r_vec + cfg.q_linear * (theta_tilde.to_vector() - r_vec)
        return ChartPoint.from_vector(v, spec.d), 0
    if band is None:
        band = gm.curvature_band(spec)
    cfg = resolve_config(cfg, band)
    state = eq.chart_state(spec, theta_tilde.to_vector(), d_mat)
    f = eq.score_fixed(state, spec)
    if cfg.corrector == "damped_newton":
        h = eq.hessian_fixed(state, spec)
        u = np.linalg.solve(h + cfg.damping * np.eye(h.shape[-1]), f)
        return ChartPoint.from_vector(theta_tilde.to_vector() - cfg.eta * u, spec.d), 0
    if cfg.corrector != "newton_cg":
        raise ValueError(f"unknown corrector {cfg.corrector!r}")
    d = spec.d
    n = sg.chart_dim(d)
    cg_max = cfg.cg_max if cfg.cg_max is not None else 10 * n
    phi = state.phi

    def matvec(v):
        vx, vth = sg.unpack_chart(v, d)
        loc = v.copy()
        loc[d:] = phi @ v[d:]
        lx, lth = sg.unpack_chart(loc, d)
        hx, hth = gm.hvp_from_cache(spec, state.cache, lx, lth)
        out = sg.pack_chart(hx, hth)
        out[d:] = phi.T @ out[d:]
        return out + cfg.damping * v

    fnorm = float(np.linalg.norm(f))
    tol_abs = max(cfg.tau * fnorm, 1e-14 * max(fnorm, 1.0))
    try:
        u, iters = _cg(matvec, f, tol_abs, cg_max)
    except CgStalled:
        # fall back to a conservative gradient step
        u = f / (band.l_big + cfg.damping)
        iters = cg_max
    return ChartPoint.from_vector(theta_tilde.to_vector() - cfg.eta * u, spec.d), iters


# ---------------------------------------------------------------------------
# batched stream engine
# ---------------------------------------------------------------------------

@dataclass
class ArmState:
    """Per-arm mutable state inside the batched engine."""

    cfg: TrackerConfig
    theta: np.ndarray          # (R, n)
    exited: np.ndarray         # (R,)
    exit_step: np.ndarray      # (R,)
    restart_rejected: np.ndarray
    tube_ok: np.ndarray
    cert_steps: int = 0
    cert_ok: int = 0
    contraction_sum: float = 0.0
    cg_iters_sum: int = 0
    corrector_steps: int = 0
    records: list = field(default_factory=list)


@dataclass
class BatchRunResult:
    """Aggregated outcome of one method arm over a batch of replicates."""

    cfg: TrackerConfig
    t_total: int
    t0: int
    theta_final: np.ndarray     # (R, n)
    target_final: np.ndarray    # (R, n)
    e_final: np.ndarray         # (R,) tracking error at T (NaN when exited)
    d_sigma_star: np.ndarray    # (R,) chart distance of the iterate to Sigma*
    d_batch_star: np.ndarray    # (R,) chart distance of the frozen target to Sigma*
    exited: np.ndarray
    exit_step: np.ndarray
    restart_rejected: np.ndarray
    tube_ok: np.ndarray         # stayed inside the tube at every recorded step
    in_tube_final: np.ndarray
    cert_steps: int
    cert_ok: int
    mean_contraction: float
    mean_cg_iters: float
    records: list               # optional per-step dicts


def _guard_exit(vec, d):
    """Chart-domain guard on packed coordinates (Frobenius rotation proxy)."""
    x = vec[..., :d]
    rot = np.sqrt(np.sum(vec[..., d:] ** 2, axis=-1))  # equals ||Theta||_F
    bad = (np.max(np.abs(x), axis=-1) > GUARD_X) | (rot / np.sqrt(2.0) >= GUARD_ROT)
    return bad | ~np.isfinite(np.sum(vec, axis=-1))


def _stream_chunks(spec, rngs, t_lo, t_hi, chunk=512):
    """Yield compressed increments z for steps t_lo+1..t_hi, shape (R, c, d)."""
    t = t_lo
    while t < t_hi:
        c = min(chunk, t_hi - t)
        y = np.stack([rng.standard_normal((c, spec.p)) for rng in rngs])
        z = (y @ spec.k_chol.T) @ spec.w
        yield t, z
        t += c


def _init_theta(spec, arm_cfg, d_mat, target_vec, rng_init):
    """Initial iterate at the restart index for one arm; returns (vec, rejected, exited)."""
    r_count = d_mat.shape[0]
    n = sg.chart_dim(spec.d)
    rejected = np.zeros(r_count, dtype=bool)
    exited = np.zeros(r_count, dtype=bool)
    if arm_cfg.init == "oracle":
        return target_vec.copy(), rejected, exited
    if arm_cfg.init == "tube_perturbation":
        u = rng_init.standard_normal((r_count, n))
        u /= np.linalg.norm(u, axis=-1, keepdims=True)
        radius = arm_cfg.perturb_frac * arm_cfg.tube_radius
        scale = radius * rng_init.random(r_count) ** (1.0 / n)
        return target_vec + scale[:, None] * u, rejected, exited
    if arm_cfg.init == "random_far":
        u = rng_init.standard_normal((r_count, n))
        u /= np.linalg.norm(u, axis=-1, keepdims=True)
        vec = arm_cfg.far_norm * u
        exited = _guard_exit(vec, spec.d)
        return vec, rejected, exited
    if arm_cfg.init != "linear_restart":
        raise ValueError(f"unknown init {arm_cfg.init!r}")
    sigma_hat, rejected = linear_restart_batch(spec, d_mat)
    vec = np.zeros((r_count, n))
    for i in range(r_count):
        sig = sigma_hat[i]
        if rejected[i]:
            sig = spd_floor(sig)
        try:
            vec[i] = sg.chart_log(spec.base, sig).to_vector()
        except (sg.ChartDomainExceeded, sg.DegenerateSpectrum):
            exited[i] = True
    return vec, rejected, exited


def run_stream_batch(spec, t_total, seeds, arms, band=None, record_steps=False,
                     solver_tol=1e-12, chunk=512, init_seed=1):
    """Track a batch of streams with one or more method arms.

    ``seeds`` is a sequence of per-replicate seeds (ints or SeedSequence);
    all arms see the same streams and share the per-step frozen target solve.
    Returns one BatchRunResult per arm.
    """
    if band is None:
        band = gm.curvature_band(spec)
    rngs = [np.random.default_rng(s) for s in seeds]
    r_count = len(rngs)
    d = spec.d
    n = sg.chart_dim(d)
    cfg0 = arms[0]
    t0 = int(np.ceil(cfg0.restart_frac * t_total))
    if any(int(np.ceil(a.restart_frac * t_total)) != t0 for a in arms):
        raise ValueError("arms must share the restart index")

    # accumulate the statistic up to the restart index
    d_mat = np.zeros((r_count, d, d))
    for t_done, z in _stream_chunks(spec, rngs, 0, t0, chunk=chunk):
        d_mat = d_mat * (t_done / (t_done + z.shape[1])) \
            + np.einsum("rck,rcl->rkl", z, z) / (t_done + z.shape[1])

    # frozen target at the restart index (cold start)
    tvec, tres, _, th_own, tcache, tok = eq.frozen_newton_batch(
        spec, d_mat, tol=solver_tol)
    thess, tphi = eq.fixed_from_own(spec, tvec, th_own)
    base_exited = ~tok

    rng_init = np.random.default_rng(init_seed)

    states = []
    for arm in arms:
        cfg = resolve_config(arm, band)
        vec, rejected, init_exited = _init_theta(spec, cfg, d_mat, tvec, rng_init)
        exited = base_exited | init_exited
        e0 = np.linalg.norm(vec - tvec, axis=-1)
        st = ArmState(
            cfg=cfg, theta=vec,
            exited=exited,
            exit_step=np.where(exited, t0, -1).astype(int),
            restart_rejected=rejected,
            tube_ok=~exited & (e0 <= cfg.tube_radius))
        if record_steps:
            st.records.append(dict(t=t0, e=np.where(st.exited, np.nan, e0),
                                   in_tube=(e0 <= cfg.tube_radius) & ~st.exited,
                                   contraction=np.full(r_count, np.nan),
                                   cg_iters=np.zeros(r_count, dtype=int)))
        states.append(st)

    prev_target_vec = tvec
    prev_target_hess = thess
    prev_target_cache = tcache
    prev_target_phi = tphi

    for t_done, z_chunk in _stream_chunks(spec, rngs, t0, t_total, chunk=chunk):
        for j in range(z_chunk.shape[1]):
            t = t_done + j + 1
            z = z_chunk[:, j, :]
            # freeze the statistic of replicates that exited in every arm so
            # the shared solver has no work left on them
            need = np.zeros(r_count, dtype=bool)
            for st in states:
                need |= ~st.exited
            delta = np.where(need[:, None, None],
                             (np.einsum("rk,rl->rkl", z, z) - d_mat) / t, 0.0)
            d_new = d_mat + delta

            # shared frozen solve at the new statistic, warm started
            new_tvec, new_tres, _, new_h_own, new_cache, new_tok = \
                eq.frozen_newton_batch(spec, d_new, init=prev_target_vec,
                                       tol=solver_tol, max_iter=25, mask=need)
            new_thess, new_phi = eq.fixed_from_own(spec, new_tvec, new_h_own)
            solve_failed = ~new_tok

            # shared first-order response for the new increment
            bx, bth = gm.dstat_from_cache(spec, prev_target_cache, delta)
            bvec = sg.pack_chart(bx, bth)
            bvec_fixed = bvec.copy()
            bvec_fixed[..., d:] = np.einsum("rji,rj->ri", prev_target_phi, bvec[..., d:])
            resp, _ = eq._masked_solve(prev_target_hess, bvec_fixed, need)
            resp = -resp

            for st in states:
                cfg = st.cfg
                active = ~st.exited
                if cfg.order == 1:
                    shift = -resp if cfg.wrong_sign else resp
                    theta_tilde = st.theta + shift
                else:
                    theta_tilde = st.theta
                e_pre = np.linalg.norm(theta_tilde - new_tvec, axis=-1)

                if cfg.corrector == "oracle_linear":
                    theta_new = new_tvec + cfg.q_linear * (theta_tilde - new_tvec)
                    cg_iters = np.zeros(r_count, dtype=int)
                else:
                    theta_new, cg_iters = _correct_batch(
                        spec, st, theta_tilde, d_new, band, active)
                e_post = np.linalg.norm(theta_new - new_tvec, axis=-1)

                newly_out = active & (_guard_exit(theta_new, d) | solve_failed)
                st.exit_step = np.where(newly_out & (st.exit_step < 0), t, st.exit_step)
                st.exited |= newly_out
                ok = ~st.exited
                st.theta = np.where(ok[:, None], theta_new, st.theta)

                in_tube_pre = ok & (e_pre <= cfg.tube_radius)
                ratio = np.where(e_pre > 0, e_post / np.maximum(e_pre, 1e-300), 0.0)
                st.cert_steps += int(np.sum(in_tube_pre))
                st.cert_ok += int(np.sum(in_tube_pre & (ratio <= 7.0 / 8.0)))
                st.contraction_sum += float(np.sum(ratio[in_tube_pre]))
                st.cg_iters_sum += int(np.sum(cg_iters[ok]))
                st.corrector_steps += int(np.sum(ok))
                st.tube_ok &= ok & (e_post <= cfg.tube_radius)
                if record_steps:
                    st.records.append(dict(
                        t=t, e=np.where(ok, e_post, np.nan),
                        in_tube=ok & (e_post <= cfg.tube_radius),
                        contraction=np.where(ok, ratio, np.nan),
                        cg_iters=cg_iters))

            d_mat = d_new
            if np.all(new_tok):
                prev_target_vec = new_tvec
                prev_target_hess = new_thess
                prev_target_cache = new_cache
                prev_target_phi = new_phi
            else:
                prev_target_vec = np.where(new_tok[:, None], new_tvec, prev_target_vec)
                prev_target_hess = np.where(new_tok[:, None, None], new_thess, prev_target_hess)
                prev_target_phi = np.where(new_tok[:, None, None], new_phi, prev_target_phi)
                prev_target_cache = gm.merge_cache(new_tok, new_cache, prev_target_cache)

    results = []
    for st in states:
        e_final = np.linalg.norm(st.theta - prev_target_vec, axis=-1)
        e_final = np.where(st.exited, np.nan, e_final)
        results.append(BatchRunResult(
            cfg=st.cfg, t_total=t_total, t0=t0,
            theta_final=st.theta, target_final=prev_target_vec,
            e_final=e_final,
            d_sigma_star=np.linalg.norm(st.theta, axis=-1),
            d_batch_star=np.linalg.norm(prev_target_vec, axis=-1),
            exited=st.exited, exit_step=st.exit_step,
            restart_rejected=st.restart_rejected,
            tube_ok=st.tube_ok,
            in_tube_final=~st.exited & (e_final <= st.cfg.tube_radius),
            cert_steps=st.cert_steps, cert_ok=st.cert_ok,
            mean_contraction=st.contraction_sum / max(st.cert_steps, 1),
            mean_cg_iters=st.cg_iters_sum / max(st.corrector_steps, 1),
            records=st.records))
    return results


def _correct_batch(spec, st, theta_tilde, d_new, band, active):
    """Batched damped Newton / Newton-CG corrector step for one arm."""
    cfg = st.cfg
    d = spec.d
    n = sg.chart_dim(d)
    state = eq.chart_state(spec, theta_tilde, d_new)
    f = eq.score_fixed(state, spec)
    h = eq.hessian_fixed(state, spec) + cfg.damping * np.eye(n)
    if cfg.corrector == "damped_newton":
        u, _ = eq._masked_solve(h, f, active)
        return theta_tilde - cfg.eta * u, np.zeros(theta_tilde.shape[0], dtype=int)
    if cfg.corrector != "newton_cg":
        raise ValueError(f"unknown corrector {cfg.corrector!r}")
    cg_max = cfg.cg_max if cfg.cg_max is not None else 10 * n
    fnorm = np.linalg.norm(f, axis=-1)
    tol = np.maximum(cfg.tau * fnorm, 1e-14 * np.maximum(fnorm, 1.0))
    u = np.zeros_like(f)
    r = f.copy()
    rr = np.sum(r * r, axis=-1)
    live = active & (np.sqrt(rr) > tol)
    p = r.copy()
    iters = np.zeros(theta_tilde.shape[0], dtype=int)
    stalled = np.zeros_like(live)
    for _ in range(cg_max):
        if not np.any(live):
            break
        hp = np.einsum("rij,rj->ri", h, p)
        php = np.sum(p * hp, axis=-1)
        bad = live & (php <= 0)
        stalled |= bad
        live &= ~bad
        alpha = np.where(live, rr / np.where(php == 0, 1.0, php), 0.0)
        u = u + alpha[:, None] * p
        r = r - alpha[:, None] * hp
        rr_new = np.sum(r * r, axis=-1)
        iters = np.where(live, iters + 1, iters)
        done = live & (np.sqrt(rr_new) <= tol)
        live &= ~done
        beta = np.where(live, rr_new / np.where(rr == 0, 1.0, rr), 0.0)
        p = np.where(live[:, None], r + beta[:, None] * p, p)
        rr = np.where(live, rr_new, rr)
    stalled |= live  # cap reached without meeting the tolerance
    if np.any(stalled):
        fallback = f / (band.l_big + cfg.damping)
        u = np.where(stalled[:, None], fallback, u)
        iters = np.where(stalled, cg_max, iters)
    return theta_tilde - cfg.eta * u, iters


# ---------------------------------------------------------------------------
# single-run interface
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    """Step-by-step record of one tracking run."""

    t: np.ndarray
    e: np.ndarray
    in_tube: np.ndarray
    contraction: np.ndarray
    cg_iters: np.ndarray
    t0: int
    t_total: int
    e_final: float
    d_sigma_star: float
    d_batch_star: float
    exited: bool
    exit_step: int
    restart_rejected: bool
    tube_ok: bool


def run_stream(spec, t_total, seed, cfg, band=None):
    """Track one stream and return its full step record."""
    results = run_stream_batch(spec, t_total, [seed], [cfg], band=band,
                               record_steps=True, solver_tol=cfg.solver_tol)
    res = results[0]
    recs = res.records
    return RunRecord(
        t=np.array([r["t"] for r in recs]),
        e=np.array([r["e"][0] for r in recs]),
        in_tube=np.array([r["in_tube"][0] for r in recs]),
        contraction=np.array([r["contraction"][0] for r in recs]),
        cg_iters=np.array([r["cg_iters"][0] for r in recs]),
        t0=res.t0, t_total=t_total,
        e_final=float(res.e_final[0]),
        d_sigma_star=float(res.d_sigma_star[0]),
        d_batch_star=float(res.d_batch_star[0]),
        exited=bool(res.exited[0]),
        exit_step=int(res.exit_step[0]),
        restart_rejected=bool(res.restart_rejected[0]),
        tube_ok=bool(res.tube_ok[0]))
