"""One-dimensional moving-target labs isolating predictor and corrector order.

The target branch is the cubic r(S) = S + S^2/2 + 0.1 S^3 driven by the
running mean S_t of i.i.d. standard normals.  A predictor of order m Taylor
extrapolates along the statistic increment; a corrector (oracle linear,
Newton, Halley, or damped Newton on the score F(x,S) = e + 0.2 e^2 with
e = x - r(S)) pulls the iterate back toward the branch.  A small
four-component diagonal variant isolates the effect of an inexact linear
solve in the corrector.
"""

import dataclasses

import numpy as np

from .errors import SingularDenominator

DENOM_TOL = 1e-14


@dataclasses.dataclass(frozen=True)
class ScalarTargetModel:
    """Cubic target branch with an optional nonlinear score on top.

    kind "smooth_branch" exposes only the branch r and its derivatives;
    kind "nonlinear_score" additionally defines F(x, S) = e + 0.2 e^2.
    """

    kind: str = "smooth_branch"

    def r(self, s):
        return s + 0.5 * s * s + 0.1 * s ** 3

    def r1(self, s):
        return 1.0 + s + 0.3 * s * s

    def r2(self, s):
        return 1.0 + 0.6 * s

    def score(self, x, s):
        e = x - self.r(s)
        return e + 0.2 * e * e

    def score1(self, x, s):
        return 1.0 + 0.4 * (x - self.r(s))

    def score2(self, x, s):
        return 0.4 * np.ones_like(np.asarray(x, dtype=float))


@dataclasses.dataclass(frozen=True)
class ScalarCorrector:
    """Corrector family: linear(q), newton, halley, damped_newton(lam)."""

    order: str
    q: float = 0.7
    lam: float = 0.0

    def __post_init__(self):
        if self.order not in ("linear", "newton", "halley", "damped_newton"):
            raise ValueError(f"unknown corrector {self.order!r}")
        if self.order == "linear" and not 0.0 < self.q < 1.0:
            raise ValueError("linear contraction factor must be in (0, 1)")
        if self.lam < 0:
            raise ValueError("damping must be nonnegative")


def scalar_predict(x, s_prev, ds, m, model):
    """Order-m Taylor extrapolation of the iterate along the increment ds."""
    if m not in (0, 1, 2):
        raise ValueError("predictor order must be 0, 1 or 2")
    out = np.asarray(x, dtype=float).copy()
    if m >= 1:
        out = out + model.r1(s_prev) * ds
    if m >= 2:
        out = out + 0.5 * model.r2(s_prev) * ds * ds
    return out


def _check_denom(denom):
    if np.any(np.abs(denom) < DENOM_TOL):
        raise SingularDenominator("corrector denominator below tolerance")


def scalar_correct(x, s, c, model):
    """One corrector application at statistic value s."""
    x = np.asarray(x, dtype=float)
    if c.order == "linear":
        r = model.r(s)
        return r + c.q * (x - r)
    f = model.score(x, s)
    f1 = model.score1(x, s)
    if c.order == "newton":
        _check_denom(f1)
        return x - f / f1
    if c.order == "halley":
        f2 = model.score2(x, s)
        denom = 2.0 * f1 * f1 - f * f2
        _check_denom(denom)
        return x - 2.0 * f * f1 / denom
    denom = f1 + c.lam
    _check_denom(denom)
    return x - f / denom


def _normal_streams(seeds, t_total):
    """Stack per-replicate standard normal streams, one column per seed."""
    ys = np.empty((t_total, len(seeds)))
    for j, s in enumerate(seeds):
        ys[:, j] = np.random.default_rng(s).standard_normal(t_total)
    return ys


def scalar_run_batch(model, m, corrector, t_total, seeds):
    """Predict-then-correct tracking of the running-mean branch, batched.

    Restarts on the branch at t0 = ceil(T/2); returns |x_T - r(S_T)| per
    replicate.
    """
    if t_total < 4:
        raise ValueError("need t_total >= 4")
    ys = _normal_streams(seeds, t_total)
    s_run = np.cumsum(ys, axis=0) / np.arange(1, t_total + 1)[:, None]
    t0 = int(np.ceil(t_total / 2))
    x = model.r(s_run[t0 - 1])
    for t in range(t0, t_total):
        s_prev = s_run[t - 1]
        s_new = s_run[t]
        x = scalar_predict(x, s_prev, s_new - s_prev, m, model)
        x = scalar_correct(x, s_new, corrector, model)
    return np.abs(x - model.r(s_run[-1]))


def scalar_run(model, m, corrector, t_total, seed):
    """Single-replicate run; returns the terminal tracking error."""
    return float(scalar_run_batch(model, m, corrector, t_total, [seed])[0])


# ---------------------------------------------------------------------------
# diagonal vector lab for the inexact-solve ablation
# ---------------------------------------------------------------------------

# component stiffnesses of the diagonal score Jacobian; curvature band
# (mu, L) = (1, 8) gives the inexactness budget tau_max = 3/(16*8)
STIFFNESS = np.array([1.0, 2.0, 4.0, 8.0])
VECTOR_MU = 1.0
VECTOR_L = float(STIFFNESS[-1])
TAU_MAX = 3.0 * VECTOR_MU / (16.0 * VECTOR_L)


@dataclasses.dataclass
class VectorLabResult:
    """Terminal errors and contraction summary of one inexactness setting."""

    tau: float
    e_final: np.ndarray        # (R,) Euclidean terminal tracking error
    mean_contraction: float
    contraction_steps: int


def vector_lab_run(tau, t_total, seeds, lam=0.0, m=1):
    """Track the componentwise cubic branch with an inexact Newton corrector.

    Each of the four components follows the same scalar branch; the score is
    F_i = M_i (e_i + 0.2 e_i^2) with stiffness M_i from STIFFNESS.  The
    corrector solves the damped diagonal Newton system and leaves a residual
    of exactly tau * ||F|| along F (the boundary of the inexactness
    contract), so tau = 0 is the exact solve and tau > 0 degrades the step
    to first order.  The error is propagated directly (exact Taylor
    remainders of the cubic branch), keeping the terminal values well above
    floating-point noise even on the steepest settings.
    """
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    model = ScalarTargetModel()
    ys = _normal_streams(seeds, t_total)
    s_run = np.cumsum(ys, axis=0) / np.arange(1, t_total + 1)[:, None]
    t0 = int(np.ceil(t_total / 2))
    n_rep = len(seeds)
    e = np.zeros((n_rep, STIFFNESS.size))
    contraction_sum = 0.0
    contraction_steps = 0
    for t in range(t0, t_total):
        s_prev = s_run[t - 1]
        s_new = s_run[t]
        ds = s_new - s_prev
        # exact Taylor remainder of the cubic branch past order m
        if m == 0:
            rem = model.r1(s_prev) * ds + 0.5 * model.r2(s_prev) * ds ** 2 \
                + 0.1 * ds ** 3
        elif m == 1:
            rem = 0.5 * model.r2(s_prev) * ds ** 2 + 0.1 * ds ** 3
        else:
            raise ValueError("vector lab supports predictor order 0 or 1")
        e_pre = e - rem[:, None]
        f = STIFFNESS * (e_pre + 0.2 * e_pre * e_pre)
        jac = STIFFNESS * (1.0 + 0.4 * e_pre) + lam
        _check_denom(jac)
        step = (1.0 - tau) * f / jac
        e = e_pre - step
        pre_norm = np.linalg.norm(e_pre, axis=-1)
        post_norm = np.linalg.norm(e, axis=-1)
        keep = pre_norm > 1e-13
        contraction_sum += float(np.sum(post_norm[keep] / pre_norm[keep]))
        contraction_steps += int(np.sum(keep))
    return VectorLabResult(
        tau=float(tau),
        e_final=np.linalg.norm(e, axis=-1),
        mean_contraction=contraction_sum / max(contraction_steps, 1),
        contraction_steps=contraction_steps)
