"""Slope fitting and distribution diagnostics for the experiment harness."""

import dataclasses

import numpy as np
from scipy.special import ndtr

from ..errors import InsufficientData


@dataclasses.dataclass
class SlopeFit:
    """Least-squares power-law fit of rms error against grid size."""

    slope: float
    intercept: float
    ci95_halfwidth: float
    local_slope_last: float


def fit_slope(points):
    """OLS fit of log rms vs log T; points is a sequence of (t, rms) pairs.

    The 95% interval uses the normal quantile on the slope's standard
    error; local_slope_last is the two-point slope over the last grid pair.
    """
    pts = [(float(t), float(r)) for t, r in points]
    if len(pts) < 3:
        raise InsufficientData("need at least 3 points for a slope fit")
    if any(t <= 0 or r <= 0 for t, r in pts):
        raise InsufficientData("slope fit needs positive grid and rms values")
    lt = np.log([t for t, _ in pts])
    lr = np.log([r for _, r in pts])
    n = lt.size
    xm = lt - lt.mean()
    sxx = float(xm @ xm)
    slope = float(xm @ lr) / sxx
    intercept = float(lr.mean() - slope * lt.mean())
    resid = lr - (intercept + slope * lt)
    sigma2 = float(resid @ resid) / max(n - 2, 1)
    se = np.sqrt(sigma2 / sxx)
    local = float((lr[-1] - lr[-2]) / (lt[-1] - lt[-2]))
    return SlopeFit(slope=slope, intercept=intercept,
                    ci95_halfwidth=float(1.96 * se), local_slope_last=local)


def local_slope_last(points):
    """Two-point log-log slope over the last grid pair."""
    return fit_slope(points).local_slope_last


def ks_normal(samples):
    """Kolmogorov-Smirnov sup-distance of a sample to the standard normal."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    if n < 10:
        raise InsufficientData("need at least 10 samples for a KS distance")
    cdf = ndtr(x)
    hi = np.max(np.arange(1, n + 1) / n - cdf)
    lo = np.max(cdf - np.arange(0, n) / n)
    return float(max(hi, lo))
