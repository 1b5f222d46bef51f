from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class SlopeFit:
    """
    Least-squares line y = intercept + slope * x with a two-sided confidence band.
    """

    slope: float
    intercept: float
    stderr: float
    rvalue: float
    lower: float
    upper: float
    points: int

    @property
    def r_squared(self):
        return self.rvalue**2


def fit_slope(x, y, *, confidence=0.95):
    """
    Fit a line and the slope's confidence interval (Student t, n-2 dof).

    With two points the fit is exact and the interval collapses to the slope.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2:
        raise ValueError("A slope fit needs at least two points.")
    if np.ptp(x) == 0.0:
        raise ValueError("A slope fit needs distinct abscissae.")
    result = stats.linregress(x, y)
    if x.size > 2:
        half = stats.t.ppf(0.5 + confidence / 2.0, x.size - 2) * result.stderr
    else:
        half = 0.0
    return SlopeFit(
        slope=float(result.slope),
        intercept=float(result.intercept),
        stderr=float(result.stderr),
        rvalue=float(result.rvalue),
        lower=float(result.slope - half),
        upper=float(result.slope + half),
        points=int(x.size),
    )


def nonincreasing_trend(x, y, *, confidence=0.95):
    """
    Whether y is non-increasing in x at the given confidence.

    Values are fitted through asinh, a monotone map that is linear in log|y|
    for large |y|, so maxima growing or shrinking like a power of x give a
    straight line.

    Returns:
        (passed, SlopeFit | None). Fewer than three points fall back to a
        plain monotonicity check.
    """
    y = np.asarray(y, dtype=float)
    if len(y) < 3:
        return bool(np.all(np.diff(y) <= 0.0)), None
    fit = fit_slope(x, np.arcsinh(y), confidence=confidence)
    return fit.upper <= 0.0, fit
