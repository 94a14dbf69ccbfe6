"""Protocol runners for the tracking experiments.

Each ``run_*`` function executes one protocol and returns a triple
``(config, rows, checks)``: a config dict echoed into the CSV header,
result rows in the flat schema
``experiment,setting,method,T,replicates,metric,value,stderr``,
and acceptance checks with expected value, tolerance and pass flag.
Seeding is splittable: every replicate stream is derived from
``SeedSequence([seed, experiment_tag, setting_index, replicate_index])``
so results do not depend on execution order.
"""

import dataclasses
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .. import equilibrium as eq
from .. import gaussian_model as gm
from .. import scalar_lab as sl
from .. import sym_geometry as sg
from .. import tracker as tr
from ..sym_geometry import ChartPoint
from . import stats

# stable per-experiment seed tags
TAGS = {
    "audit": 1, "scalar_order": 2, "gauss_track": 3, "transfer": 4,
    "restart": 5, "corrector_order": 6, "stress": 7, "cg_ablation": 8,
    "isserlis": 9, "damping": 10,
}


@dataclasses.dataclass
class Check:
    """One acceptance check: target, measured value, tolerance, verdict."""

    name: str
    expected: str
    measured: float
    tolerance: float
    passed: bool


def check_near(name, measured, target, tol):
    return Check(name, f"{target:g}", float(measured), float(tol),
                 bool(abs(measured - target) <= tol))


def check_below(name, measured, bound):
    return Check(name, f"<= {bound:g}", float(measured), float(bound),
                 bool(measured <= bound))


def check_above(name, measured, bound):
    return Check(name, f">= {bound:g}", float(measured), float(bound),
                 bool(measured >= bound))


def make_row(experiment, setting, method, t, replicates, metric, value,
             stderr=np.nan):
    return {
        "experiment": experiment, "setting": setting, "method": method,
        "T": t, "replicates": replicates, "metric": metric,
        "value": float(value), "stderr": float(stderr),
    }


def _seeds(seed, tag, setting_idx, n, offset=0):
    return [np.random.SeedSequence([seed, tag, setting_idx, offset + j])
            for j in range(n)]


def _rng(seed, tag, setting_idx):
    return np.random.default_rng(np.random.SeedSequence([seed, tag, setting_idx]))


def _nan_rms(x):
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    if x.size == 0:
        return np.nan, np.nan
    m2 = np.mean(x ** 2)
    rms = float(np.sqrt(m2))
    se = float(np.std(x ** 2) / (2.0 * max(rms, 1e-300) * np.sqrt(x.size)))
    return rms, se


def _trimmed_rms(x, trim=0.05):
    """RMS with the largest ``trim`` fraction of squared errors removed.

    The terminal error distribution has quartic Gaussian tails, so a plain
    mean of squares is dominated by a handful of replicates at desk-scale
    replicate counts.  Trimming a fixed upper fraction rescales every grid
    point by the same factor (the error law is scale times an
    instance-independent shape), leaving fitted slopes unchanged while
    stabilizing them.
    """
    x = np.asarray(x, dtype=float)
    x = np.sort(x[np.isfinite(x)])
    if x.size == 0:
        return np.nan, np.nan
    keep = x[:max(x.size - int(np.ceil(trim * x.size)), 1)]
    m2 = np.mean(keep ** 2)
    rms = float(np.sqrt(m2))
    se = float(np.std(keep ** 2) / (2.0 * max(rms, 1e-300) * np.sqrt(keep.size)))
    return rms, se


def _pmap(fn, tasks, workers):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


# ---------------------------------------------------------------------------
# exp01: formula audit
# ---------------------------------------------------------------------------

AUDIT_CHECKS = ("lift", "statistic_update", "stat_derivative_spectral",
                "stat_derivative_rotational", "hvp", "frozen_fixed_point")
AUDIT_ALGEBRAIC = ("lift", "statistic_update", "frozen_fixed_point")


def _rel(diff, ref):
    return float(np.linalg.norm(diff) / max(np.linalg.norm(ref), 1e-300))


def run_audit(seed, quick=False, replicates=None, workers=1):
    """Formula sanity checks over seeded instances at d=3, p=8."""
    n_inst = replicates if replicates is not None else 25
    d, p = 3, 8
    fd = 1e-5
    errs = {name: [] for name in AUDIT_CHECKS}
    for i in range(n_inst):
        rng = _rng(seed, TAGS["audit"], i)
        spec = gm.draw_model(d, p, rng)
        n = sg.chart_dim(d)

        # posterior lift: compressed route vs observation-space route
        vec = 0.3 * rng.standard_normal(n)
        sigma = sg.chart_exp(spec.base, ChartPoint.from_vector(vec, d))
        y = gm.sample_observation(spec, rng, size=40)
        s_amb = y.T @ y / 40
        a1 = gm.latent_lift(spec, sigma, gm.statistic_map(spec, s_amb))
        a2 = gm.ambient_lift(spec, sigma, s_amb)
        errs["lift"].append(_rel(a1 - a2, a2))

        # running statistic update vs direct mean of outer products
        z = gm.compress(spec, gm.sample_observation(spec, rng, size=7))
        d_run = np.zeros((d, d))
        for t in range(7):
            d_run = gm.update_statistic(d_run, z[t], t + 1)
        errs["statistic_update"].append(_rel(d_run - z.T @ z / 7, d_run))

        # realistic statistic and its frozen target
        z = gm.compress(spec, gm.sample_observation(spec, rng, size=200))
        d_mat = z.T @ z / 200
        target = eq.solve_frozen_target(spec, d_mat)
        tvec = target.theta.to_vector()
        state = eq.chart_state(spec, tvec, d_mat)
        errs["frozen_fixed_point"].append(
            float(np.linalg.norm(eq.score_fixed(state, spec))))

        # statistic derivative of the score vs central differences
        p_dir = sg.sym_part(rng.standard_normal((d, d)))
        p_dir /= np.linalg.norm(p_dir)
        b_an = eq.dstat_fixed(state, spec, p_dir)
        f_hi = eq.score_fixed(eq.chart_state(spec, tvec, d_mat + fd * p_dir), spec)
        f_lo = eq.score_fixed(eq.chart_state(spec, tvec, d_mat - fd * p_dir), spec)
        b_fd = (f_hi - f_lo) / (2 * fd)
        errs["stat_derivative_spectral"].append(_rel(b_an[:d] - b_fd[:d], b_an))
        errs["stat_derivative_rotational"].append(_rel(b_an[d:] - b_fd[d:], b_an))

        # Hessian-vector product vs central differences at the target
        u = rng.standard_normal(n)
        u /= np.linalg.norm(u)
        hu_an = eq.hessian_fixed(state, spec) @ u
        f_hi = eq.score_fixed(eq.chart_state(spec, tvec + fd * u, d_mat), spec)
        f_lo = eq.score_fixed(eq.chart_state(spec, tvec - fd * u, d_mat), spec)
        hu_fd = (f_hi - f_lo) / (2 * fd)
        errs["hvp"].append(_rel(hu_an - hu_fd, hu_an))

    config = dict(experiment="audit", instances=n_inst, d=d, p=p,
                  fd_step=fd, seed=seed, quick=quick)
    rows, checks = [], []
    widen = 2.0 if quick else 1.0
    for name in AUDIT_CHECKS:
        med = float(np.median(errs[name]))
        mx = float(np.max(errs[name]))
        rows.append(make_row("audit", "d3p8", name, 0, n_inst, "median_rel_error", med))
        rows.append(make_row("audit", "d3p8", name, 0, n_inst, "max_rel_error", mx))
        bound = (1e-12 if name in AUDIT_ALGEBRAIC else 1e-6) * widen
        checks.append(check_below(f"audit_{name}_median", med, bound))
    return config, rows, checks


# ---------------------------------------------------------------------------
# scalar labs: exp02 (predictor order), exp06 (corrector order), exp10 (damping)
# ---------------------------------------------------------------------------

SCALAR_GRID = (200, 400, 800, 1600, 3200)


def _scalar_grid(quick):
    return SCALAR_GRID[:4] if quick else SCALAR_GRID


def _scalar_rms_table(tag, seed, methods, grid, n_rep):
    """RMS terminal error per (method, T); streams are shared across methods."""
    model = sl.ScalarTargetModel()
    table = {}
    for ti, t_total in enumerate(grid):
        seeds = _seeds(seed, tag, ti, n_rep)
        for name, (m, corr) in methods.items():
            e = sl.scalar_run_batch(model, m, corr, t_total, seeds)
            table[name, t_total] = _nan_rms(e)
    return table


def _scalar_experiment(exp_name, methods, slope_targets, seed, quick,
                       replicates, tolerances):
    grid = _scalar_grid(quick)
    n_rep = replicates if replicates is not None else (120 if quick else 500)
    table = _scalar_rms_table(TAGS[exp_name], seed, methods, grid, n_rep)
    widen = 2.0 if quick else 1.0
    rows, checks = [], []
    for name in methods:
        pts = [(t, table[name, t][0]) for t in grid]
        for t, (rms, se) in ((t, table[name, t]) for t in grid):
            rows.append(make_row(exp_name, "scalar", name, t, n_rep,
                                 "rms_terminal", rms, se))
        fit = stats.fit_slope(pts)
        rows.append(make_row(exp_name, "scalar", name, 0, n_rep, "slope",
                             fit.slope, fit.ci95_halfwidth / 1.96))
        target, tol = slope_targets[name], tolerances[name]
        checks.append(check_near(f"{exp_name}_slope_{name}", fit.slope,
                                 target, tol * widen))
    config = dict(experiment=exp_name, t_grid=list(grid), replicates=n_rep,
                  seed=seed, quick=quick)
    return config, rows, checks


def run_scalar_order(seed, quick=False, replicates=None, workers=1):
    """Predictor-order hierarchy with the oracle linear corrector."""
    corr = sl.ScalarCorrector("linear", q=0.7)
    methods = {"m0": (0, corr), "m1": (1, corr), "m2": (2, corr)}
    targets = {"m0": -1.0, "m1": -2.0, "m2": -3.0}
    tols = {k: 0.15 for k in methods}
    return _scalar_experiment("scalar_order", methods, targets, seed, quick,
                              replicates, tols)


def run_corrector_order(seed, quick=False, replicates=None, workers=1):
    """Corrector-order hierarchy at predictor order zero."""
    methods = {
        "linear": (0, sl.ScalarCorrector("linear", q=0.7)),
        "newton": (0, sl.ScalarCorrector("newton")),
        "halley": (0, sl.ScalarCorrector("halley")),
    }
    targets = {"linear": -1.0, "newton": -2.0, "halley": -3.0}
    tols = {k: 0.15 for k in methods}
    return _scalar_experiment("corrector_order", methods, targets, seed, quick,
                              replicates, tols)


def run_damping(seed, quick=False, replicates=None, workers=1):
    """Fixed damping degrades the Newton corrector to first order."""
    lams = (0.0, 0.01, 0.1, 1.0)
    methods = {f"lam{lam:g}": (0, sl.ScalarCorrector("damped_newton", lam=lam))
               for lam in lams}
    targets = {f"lam{lam:g}": (-2.0 if lam == 0 else -1.0) for lam in lams}
    tols = {f"lam{lam:g}": (0.2 if lam == 0 else 0.15) for lam in lams}
    return _scalar_experiment("damping", methods, targets, seed, quick,
                              replicates, tols)


# ---------------------------------------------------------------------------
# exp08: inexact-solve ablation, plus the certified-contraction check
# ---------------------------------------------------------------------------

CG_GRID = (200, 400, 800, 1600)
CG_FRACTIONS = (0.0, 0.1, 0.5, 1.0, 2.0, 10.0)


def run_cg_ablation(seed, quick=False, replicates=None, workers=1):
    """Residual-budget ablation on the diagonal lab and the certified check.

    Any residual budget tau > 0 degrades the Newton corrector to first
    order; tau = 0 keeps the full second-order per-step law (terminal
    slope -4 with a first-order predictor).  The companion check runs the
    real latent-Gaussian corrector at the certified parameters and counts
    in-tube steps whose contraction exceeds 7/8.
    """
    grid = CG_GRID[:3] if quick else CG_GRID
    n_rep = replicates if replicates is not None else (10 if quick else 100)
    widen = 2.0 if quick else 1.0
    tag = TAGS["cg_ablation"]
    rows, checks = [], []
    for f in CG_FRACTIONS:
        tau = f * sl.TAU_MAX
        pts, contractions = [], []
        for ti, t_total in enumerate(grid):
            res = sl.vector_lab_run(tau, t_total, _seeds(seed, tag, ti, n_rep))
            rms, se = _nan_rms(res.e_final)
            pts.append((t_total, rms))
            contractions.append(res.mean_contraction)
            rows.append(make_row("cg_ablation", f"f{f:g}", "inexact_newton",
                                 t_total, n_rep, "rms_terminal", rms, se))
            rows.append(make_row("cg_ablation", f"f{f:g}", "inexact_newton",
                                 t_total, n_rep, "mean_contraction",
                                 res.mean_contraction))
        fit = stats.fit_slope(pts)
        rows.append(make_row("cg_ablation", f"f{f:g}", "inexact_newton", 0,
                             n_rep, "slope", fit.slope,
                             fit.ci95_halfwidth / 1.96))
        if f == 0:
            checks.append(check_below("cg_ablation_slope_f0", fit.slope,
                                      -3.0 / widen))
        else:
            checks.append(check_near(f"cg_ablation_slope_f{f:g}", fit.slope,
                                     -2.0, 0.3 * widen))
            checks.append(check_below(f"cg_ablation_contraction_f{f:g}",
                                      max(contractions), 1.0))

    # certified contraction of the latent-Gaussian Newton-CG corrector
    n_runs = 10 if quick else 100
    t_total = 200 if quick else 400
    spec = gm.draw_model(3, 8, _rng(seed, tag, 900))
    arm = tr.TrackerConfig(order=1, corrector="newton_cg")
    res = tr.run_stream_batch(spec, t_total, _seeds(seed, tag, 901, n_runs),
                              [arm])[0]
    frac = res.cert_ok / max(res.cert_steps, 1)
    rows.append(make_row("cg_ablation", "certified", "newton_cg", t_total,
                         n_runs, "contraction_ok_fraction", frac))
    rows.append(make_row("cg_ablation", "certified", "newton_cg", t_total,
                         n_runs, "in_tube_steps", res.cert_steps))
    rows.append(make_row("cg_ablation", "certified", "newton_cg", t_total,
                         n_runs, "mean_contraction", res.mean_contraction))
    checks.append(check_above("certified_contraction_fraction", frac,
                              0.90 if quick else 0.95))

    config = dict(experiment="cg_ablation", t_grid=list(grid),
                  replicates=n_rep, tau_max=sl.TAU_MAX,
                  fractions=list(CG_FRACTIONS), certified_runs=n_runs,
                  seed=seed, quick=quick)
    return config, rows, checks


# ---------------------------------------------------------------------------
# exp03: latent Gaussian tracking order
# ---------------------------------------------------------------------------

GAUSS_SETTINGS = (
    dict(name="d3p8", d=3, p=8, grid=(400, 800, 1600, 3200, 6400, 12800),
         n_rep=300),
    dict(name="d5p20", d=5, p=20, grid=(800, 1600, 3200, 6400), n_rep=200),
)


def _gauss_track_arms():
    return [
        tr.TrackerConfig(order=0, corrector="oracle_linear", q_linear=0.7),
        tr.TrackerConfig(order=1, corrector="oracle_linear", q_linear=0.7),
        tr.TrackerConfig(order=1, corrector="oracle_linear", q_linear=0.7,
                         wrong_sign=True),
    ]


GAUSS_ARM_NAMES = ("no_predictor", "first_order", "wrong_sign")


def _gauss_track_task(args):
    spec, t_total, seeds = args
    results = tr.run_stream_batch(spec, t_total, seeds, _gauss_track_arms())
    out = []
    for res in results:
        rms, se = _nan_rms(res.e_final)
        trimmed, t_se = _trimmed_rms(res.e_final)
        out.append((rms, se, trimmed, t_se, float(np.mean(res.exited))))
    return out


def run_gauss_track(seed, quick=False, replicates=None, workers=1):
    """Tracking-order experiment on latent Gaussian instances."""
    tag = TAGS["gauss_track"]
    rows, checks = [], []
    widen = 2.0 if quick else 1.0
    config = dict(experiment="gauss_track", seed=seed, quick=quick)
    for s_idx, setting in enumerate(GAUSS_SETTINGS):
        name = setting["name"]
        grid = setting["grid"][:3] if quick else setting["grid"]
        n_rep = replicates if replicates is not None else setting["n_rep"]
        if quick and replicates is None:
            n_rep = max(n_rep // 10, 8)
        spec = gm.draw_model(setting["d"], setting["p"], _rng(seed, tag, s_idx))
        tasks = [(spec, t, _seeds(seed, tag, 10 * s_idx + ti, n_rep))
                 for ti, t in enumerate(grid)]
        per_t = _pmap(_gauss_track_task, tasks, workers)
        config[f"{name}_t_grid"] = list(grid)
        config[f"{name}_replicates"] = n_rep
        for arm_idx, arm_name in enumerate(GAUSS_ARM_NAMES):
            pts = []
            for (t, out) in zip(grid, per_t):
                rms, se, trimmed, t_se, exit_frac = out[arm_idx]
                pts.append((t, trimmed))
                rows.append(make_row("gauss_track", name, arm_name, t, n_rep,
                                     "rms_track", rms, se))
                rows.append(make_row("gauss_track", name, arm_name, t, n_rep,
                                     "trimmed_rms_track", trimmed, t_se))
                rows.append(make_row("gauss_track", name, arm_name, t, n_rep,
                                     "exit_fraction", exit_frac))
            fit = stats.fit_slope(pts)
            rows.append(make_row("gauss_track", name, arm_name, 0, n_rep,
                                 "local_slope_last", fit.local_slope_last))
            rows.append(make_row("gauss_track", name, arm_name, 0, n_rep,
                                 "slope", fit.slope, fit.ci95_halfwidth / 1.96))
            # the pooled OLS slope replaces the last-pair slope on the
            # truncated quick grid, where a single pair is too noisy
            local = fit.slope if quick else fit.local_slope_last
            if arm_name == "no_predictor":
                checks.append(check_near(f"gauss_track_{name}_no_predictor",
                                         local, -1.0, 0.15 * widen))
            elif arm_name == "first_order":
                checks.append(check_near(f"gauss_track_{name}_first_order",
                                         local, -2.0, 0.25 * widen))
            else:
                checks.append(check_above(f"gauss_track_{name}_wrong_sign",
                                          local, -1.3 - 0.3 * (widen - 1.0)))
    return config, rows, checks


# ---------------------------------------------------------------------------
# exp04: batch-to-online transfer
# ---------------------------------------------------------------------------

TRANSFER_GRID = (800, 1600, 3200, 6400, 12800)


def _batch_risk_direct(spec, t_total, n_rep, rng, chunk=128):
    """T * E d^2(batch target, Sigma*) by direct simulation of the statistic."""
    d = spec.d
    acc = np.zeros((n_rep, d, d))
    done = 0
    while done < t_total:
        c = min(chunk, t_total - done)
        z = (rng.standard_normal((n_rep, c, spec.p)) @ spec.k_chol.T) @ spec.w
        acc += np.einsum("rck,rcl->rkl", z, z)
        done += c
    d_mat = acc / t_total
    tvec, _, _, _, _, ok = eq.frozen_newton_batch(spec, d_mat)
    d2 = np.sum(tvec ** 2, axis=-1)[ok]
    risk = t_total * np.mean(d2)
    se = t_total * np.std(d2) / np.sqrt(max(d2.size, 1))
    return float(risk), float(se), int(np.sum(~ok))


def run_transfer(seed, quick=False, replicates=None, workers=1):
    """Terminal lag decay, rescaled risk transfer, and the projected CLT."""
    tag = TAGS["transfer"]
    grid = TRANSFER_GRID[:3] if quick else TRANSFER_GRID
    n_rep = replicates if replicates is not None else (40 if quick else 400)
    n_big = 800 if quick else 8000
    widen = 2.0 if quick else 1.0
    spec = gm.draw_model(3, 8, _rng(seed, tag, 0))
    consts = eq.batch_constants(spec)
    arm = tr.TrackerConfig(order=1, corrector="newton_cg")
    rows, checks = [], []
    sqrt_t_rms = []
    last = None
    for ti, t_total in enumerate(grid):
        res = tr.run_stream_batch(spec, t_total,
                                  _seeds(seed, tag, ti, n_rep), [arm])[0]
        rms, se = _nan_rms(res.e_final)
        val = np.sqrt(t_total) * rms
        sqrt_t_rms.append(val)
        rows.append(make_row("transfer", "d3p8", "first_order_newton_cg",
                             t_total, n_rep, "sqrt_t_rms_track", val,
                             np.sqrt(t_total) * se))
        rows.append(make_row("transfer", "d3p8", "first_order_newton_cg",
                             t_total, n_rep, "exit_fraction",
                             float(np.mean(res.exited))))
        if ti == len(grid) - 1:
            last = res

    t_last = grid[-1]
    ok = ~last.exited
    d2_on = np.sum(last.theta_final ** 2, axis=-1)[ok]
    d2_bat = np.sum(last.target_final ** 2, axis=-1)[ok]
    # batch risk from a large direct simulation; the online risk adds the
    # paired online-batch gap measured on the tracking runs, which shares
    # their streams and removes most of the Monte Carlo variance
    risk_bat, risk_bat_se, n_failed = _batch_risk_direct(
        spec, t_last, n_big, _rng(seed, tag, 800))
    pair_gap = t_last * float(np.mean(d2_on - d2_bat))
    pair_se = t_last * float(np.std(d2_on - d2_bat) / np.sqrt(d2_on.size))
    risk_on = risk_bat + pair_gap
    tr_j = consts.trace_inv_fisher

    rows.append(make_row("transfer", "d3p8", "online", t_last, n_rep,
                         "rescaled_risk", risk_on, pair_se))
    rows.append(make_row("transfer", "d3p8", "batch", t_last, n_big,
                         "rescaled_risk", risk_bat, risk_bat_se))
    rows.append(make_row("transfer", "d3p8", "population", 0, 0,
                         "trace_inv_fisher", tr_j))
    rows.append(make_row("transfer", "d3p8", "batch", t_last, n_big,
                         "solver_failures", n_failed))

    # projected CLT statistic at the largest grid size
    rng_dir = _rng(seed, tag, 801)
    v = rng_dir.standard_normal(sg.chart_dim(spec.d))
    v /= np.linalg.norm(v)
    denom = np.sqrt(float(v @ consts.v_star @ v))
    z_stat = np.sqrt(t_last) * (last.theta_final[ok] @ v) / denom
    ks = stats.ks_normal(z_stat)
    rows.append(make_row("transfer", "d3p8", "online", t_last, n_rep,
                         "ks_projected_clt", ks))

    decay = sqrt_t_rms[0] / max(sqrt_t_rms[-1], 1e-300)
    monotone = all(a > b for a, b in zip(sqrt_t_rms, sqrt_t_rms[1:]))
    checks.append(check_above("transfer_sqrt_t_rms_decay", decay,
                              5.0 if quick else 10.0))
    checks.append(Check("transfer_sqrt_t_rms_monotone", "1", float(monotone),
                        0.0, monotone))
    checks.append(check_below("transfer_online_batch_gap",
                              abs(pair_gap) / risk_bat, 0.02 * widen))
    checks.append(check_below("transfer_online_vs_trace",
                              abs(risk_on - tr_j) / tr_j, 0.05 * widen))
    checks.append(check_below("transfer_batch_vs_trace",
                              abs(risk_bat - tr_j) / tr_j, 0.05 * widen))
    checks.append(check_below("transfer_ks", ks, 0.1 * widen))

    config = dict(experiment="transfer", t_grid=list(grid), replicates=n_rep,
                  batch_replicates=n_big, trace_inv_fisher=tr_j,
                  sandwich_gap=consts.sandwich_gap, seed=seed, quick=quick)
    return config, rows, checks


# ---------------------------------------------------------------------------
# exp05: restart localization
# ---------------------------------------------------------------------------

RESTART_GRID = (200, 400, 800, 1600)
RESTART_INITS = ("linear_restart", "tube_perturbation", "random_far")


def run_restart(seed, quick=False, replicates=None, workers=1):
    """Tube entry of restart initializations against far starts."""
    tag = TAGS["restart"]
    grid = RESTART_GRID[:3] if quick else RESTART_GRID
    n_rep = replicates if replicates is not None else (20 if quick else 200)
    widen = 2.0 if quick else 1.0
    spec = gm.draw_model(3, 8, _rng(seed, tag, 0))
    arms = [tr.TrackerConfig(order=1, corrector="newton_cg", init=init)
            for init in RESTART_INITS]
    rows, checks = [], []
    entry = {}
    for ti, t_total in enumerate(grid):
        results = tr.run_stream_batch(spec, t_total,
                                      _seeds(seed, tag, ti, n_rep), arms)
        for init, res in zip(RESTART_INITS, results):
            frac = float(np.mean(res.in_tube_final))
            entry[init, t_total] = frac
            rms, se = _nan_rms(res.e_final)
            rows.append(make_row("restart", init, "first_order_newton_cg",
                                 t_total, n_rep, "tube_entry_fraction", frac))
            rows.append(make_row("restart", init, "first_order_newton_cg",
                                 t_total, n_rep, "exit_fraction",
                                 float(np.mean(res.exited))))
            rows.append(make_row("restart", init, "first_order_newton_cg",
                                 t_total, n_rep, "rms_track", rms, se))
            if init == "linear_restart":
                rows.append(make_row("restart", init, "first_order_newton_cg",
                                     t_total, n_rep, "restart_rejected_fraction",
                                     float(np.mean(res.restart_rejected))))
    far_max = max(entry["random_far", t] for t in grid)
    checks.append(check_below("restart_random_far_entry", far_max,
                              0.10 * widen))
    late = [t for t in grid if t >= 800] or [grid[-1]]
    gap = max(abs(entry["linear_restart", t] - entry["tube_perturbation", t])
              for t in late)
    checks.append(check_below("restart_linear_vs_perturbation_entry", gap,
                              0.1 * widen))
    config = dict(experiment="restart", t_grid=list(grid), replicates=n_rep,
                  tube_radius=arms[0].tube_radius, seed=seed, quick=quick)
    return config, rows, checks


# ---------------------------------------------------------------------------
# exp07: stress factorial
# ---------------------------------------------------------------------------

STRESS_GAPS = {
    "gap_wide": (2.6, 1.0, 0.2),
    "gap_medium": (1.8, 1.0, 0.7),
    "gap_narrow": (1.5, 1.0, 0.95),
}
STRESS_NOISE = (0.1, 0.5, 2.0)
STRESS_COND = {"h_well": None, "h_ill": 30.0}


def _stress_task(args):
    spec, t_total, seeds = args
    arm = tr.TrackerConfig(order=1, corrector="newton_cg", tube_radius=0.8)
    res = tr.run_stream_batch(spec, t_total, seeds, [arm])[0]
    rms, se = _nan_rms(res.e_final)
    return rms, se, float(np.mean(res.exited)), float(np.mean(res.in_tube_final))


def run_stress(seed, quick=False, replicates=None, workers=1):
    """Factorial stress grid: eigengap x noise level x loading conditioning."""
    tag = TAGS["stress"]
    n_rep = replicates if replicates is not None else (2 if quick else 20)
    grid = (400,) if quick else (400, 800, 1600)
    cells = []
    for gap_name, eigs in STRESS_GAPS.items():
        for noise in STRESS_NOISE:
            for cond_name, cond in STRESS_COND.items():
                cells.append((gap_name, eigs, noise, cond_name, cond))
    if quick:
        cells = [c for c in cells if c[2] == 0.5 and c[3] == "h_well"]
    tasks, labels = [], []
    for c_idx, (gap_name, eigs, noise, cond_name, cond) in enumerate(cells):
        spec = gm.draw_model(3, 10, _rng(seed, tag, c_idx), noise_var=noise,
                             eigenvalues=eigs, h_condition=cond)
        for ti, t_total in enumerate(grid):
            tasks.append((spec, t_total,
                          _seeds(seed, tag, 100 + 10 * c_idx + ti, n_rep)))
            labels.append((f"{gap_name}|noise{noise:g}|{cond_name}", t_total))
    outs = _pmap(_stress_task, tasks, workers)
    rows = []
    for (label, t_total), (rms, se, exit_frac, in_tube) in zip(labels, outs):
        rows.append(make_row("stress", label, "first_order_newton_cg",
                             t_total, n_rep, "rms_track", rms, se))
        rows.append(make_row("stress", label, "first_order_newton_cg",
                             t_total, n_rep, "exit_fraction", exit_frac))
        rows.append(make_row("stress", label, "first_order_newton_cg",
                             t_total, n_rep, "in_tube_fraction", in_tube))
    config = dict(experiment="stress", t_grid=list(grid), replicates=n_rep,
                  noise_levels=list(STRESS_NOISE), tube_radius=0.8,
                  seed=seed, quick=quick)
    return config, rows, []


# ---------------------------------------------------------------------------
# exp09: score-covariance (Isserlis) check, plus the Wishart moment oracle
# ---------------------------------------------------------------------------

ISSERLIS_GRID = (1000, 4000, 16000, 64000, 256000)


def run_isserlis(seed, quick=False, replicates=None, workers=1):
    """Monte Carlo score covariance against the closed Fisher form."""
    tag = TAGS["isserlis"]
    grid = ISSERLIS_GRID[:3] if quick else ISSERLIS_GRID
    n_pairs = replicates if replicates is not None else 10
    widen = 2.0 if quick else 1.0
    spec = gm.draw_model(3, 8, _rng(seed, tag, 0))
    d = spec.d
    rng_dir = _rng(seed, tag, 1)
    # the second direction of each pair is a perturbation of the first, so
    # the covariance being tested stays comparable to its own noise scale
    pairs = []
    for _ in range(n_pairs):
        u = sg.sym_part(rng_dir.standard_normal((d, d)))
        u /= np.linalg.norm(u)
        w = sg.sym_part(rng_dir.standard_normal((d, d)))
        v = u + 0.25 * w / np.linalg.norm(w)
        pairs.append((u, v / np.linalg.norm(v)))
    rows, checks = [], []
    medians = []
    for ni, n in enumerate(grid):
        rel = []
        for pi, (u, v) in enumerate(pairs):
            rng = _rng(seed, tag, 100 + 100 * ni + pi)
            mc, exact, abs_err = gm.isserlis_mc_check(spec, u, v, n, rng)
            rel.append(abs_err / max(abs(exact), 1e-300))
        med = float(np.median(rel))
        medians.append(med)
        rows.append(make_row("isserlis", "d3p8", "score_covariance", n,
                             n_pairs, "median_rel_error", med))
    fit = stats.fit_slope(list(zip(grid, medians)))
    rows.append(make_row("isserlis", "d3p8", "score_covariance", 0, n_pairs,
                         "slope", fit.slope, fit.ci95_halfwidth / 1.96))
    bound = 3e-3 * np.sqrt(ISSERLIS_GRID[-1] / grid[-1]) * widen
    checks.append(check_below("isserlis_median_final", medians[-1], bound))
    checks.append(check_near("isserlis_slope", fit.slope, -0.45,
                             0.15 * widen))

    # streaming second-moment oracle for the compressed statistic
    # the Wishart simulation is cheap; quick mode keeps the full count so
    # the 5 percent moment comparison stays inside its own noise scale
    n_w = 2000
    for wi, t_total in enumerate((10, 100)):
        rng = _rng(seed, tag, 500 + wi)
        z = (rng.standard_normal((n_w, t_total, spec.p)) @ spec.k_chol.T) @ spec.w
        d_mat = np.einsum("rck,rcl->rkl", z, z) / t_total
        err2 = np.sum((d_mat - spec.d_star) ** 2, axis=(1, 2))
        mc = float(np.mean(err2))
        exact = gm.wishart_second_moment(spec, t_total)
        rows.append(make_row("isserlis", "wishart", "second_moment", t_total,
                             n_w, "mc_over_exact", mc / exact,
                             float(np.std(err2) / np.sqrt(n_w) / exact)))
        checks.append(check_near(f"wishart_moment_t{t_total}", mc / exact,
                                 1.0, 0.05 * widen))
    config = dict(experiment="isserlis", n_grid=list(grid),
                  direction_pairs=n_pairs, wishart_replicates=n_w,
                  seed=seed, quick=quick)
    return config, rows, checks


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

EXPERIMENTS = {
    "audit": run_audit,
    "scalar-order": run_scalar_order,
    "corrector-order": run_corrector_order,
    "damping": run_damping,
    "gauss-track": run_gauss_track,
    "transfer": run_transfer,
    "cg-ablation": run_cg_ablation,
    "isserlis": run_isserlis,
    "restart": run_restart,
    "stress": run_stress,
}
