"""Profile-likelihood risk-ratio estimation under a Poisson approximation.

Conditioning each study's total event count on the two arms makes the
risk ratio theta the only parameter of a product-binomial likelihood;
the profile maximum satisfies a one-dimensional fixed point.  A moment
estimator adds between-study heterogeneity on the ratio scale.
All inputs are continuity-corrected tables with strictly positive
cells.
"""
from __future__ import annotations

import math
from enum import Enum
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import ConvergenceError, DomainError
from .tables import CorrectedTable


class PlReference(str, Enum):
    """Reference distribution for the interval quantile."""

    NORMAL = "normal"
    T = "t"


def _arrays(tables: Sequence[CorrectedTable]):
    if len(tables) < 1:
        raise DomainError("at least one study required")
    xt = np.array([t.events_trt for t in tables], dtype=float)
    nt = np.array([t.size_trt for t in tables], dtype=float)
    xc = np.array([t.events_ctl for t in tables], dtype=float)
    nc = np.array([t.size_ctl for t in tables], dtype=float)
    if np.any(xt <= 0) or np.any(xc <= 0) or np.any(nt <= 0) or np.any(nc <= 0):
        raise DomainError("all cells must be positive; correct tables upstream")
    return xt, nt, xc, nc


def pl_point_estimate(
    tables: Sequence[CorrectedTable],
    tol: float = 1e-7,
    max_iter: int = 1000,
    theta0: float = 1.0,
) -> tuple[float, int]:
    """Profile-maximum risk ratio on the log scale.

    Iterates the fixed point
      theta <- sum_i xt_i nc_i/(nc_i + theta nt_i) / sum_i xc_i nt_i/(nc_i + theta nt_i)
    until successive iterates differ by less than `tol`.  A single
    study converges in one step to the exact sample risk ratio.

    Returns
    -------
    (log_theta, iterations)

    Raises
    ------
    ConvergenceError
        If the cap is reached first.
    """
    xt, nt, xc, nc = _arrays(tables)
    theta = theta0
    for it in range(1, max_iter + 1):
        denom = nc + theta * nt
        new = float((xt * nc / denom).sum() / (xc * nt / denom).sum())
        if abs(new - theta) < tol:
            return math.log(new), it
        theta = new
    raise ConvergenceError(f"fixed point did not converge in {max_iter} iterations")


def pl_variance(tables: Sequence[CorrectedTable], log_theta: float) -> float:
    """Large-sample variance of the log risk ratio at the profile maximum."""
    xt, nt, xc, nc = _arrays(tables)
    theta = math.exp(log_theta)
    alpha = theta * nt / (nc + theta * nt)
    denom = float(((xt + xc) * alpha * (1.0 - alpha)).sum())
    if denom <= 0:
        raise DomainError("degenerate information; variance undefined")
    return 1.0 / denom


def pl_tau2(tables: Sequence[CorrectedTable], log_theta: float) -> float:
    """Moment estimate of between-study variance on the log-ratio scale.

    A beta-binomial style overdispersion estimate on the event-split
    proportion, mapped to the ratio scale and truncated at zero.
    """
    xt, nt, xc, nc = _arrays(tables)
    y = xt
    n_tot = xt + xc
    mu = float(y.sum() / n_tot.sum())
    denom = float((n_tot * (n_tot - 1.0)).sum())
    if denom <= 0:
        return 0.0
    tau2_p = (float(((y - n_tot * mu) ** 2).sum()) - float((n_tot * mu * (1.0 - mu)).sum())) / denom
    return max(0.0, tau2_p / (1.0 - mu) ** 4)


def pl_interval(
    tables: Sequence[CorrectedTable],
    log_theta: float,
    distr: PlReference,
    level: float = 0.95,
) -> tuple[float, float]:
    """Confidence interval for the risk ratio (ratio scale).

    Half-width on the log scale is quantile * sqrt(variance + tau2);
    the t variant uses k degrees of freedom.
    """
    if not 0.0 < level < 1.0:
        raise DomainError(f"confidence level must be in (0, 1), got {level}")
    distr = PlReference(distr)
    k = len(tables)
    var = pl_variance(tables, log_theta) + pl_tau2(tables, log_theta)
    if distr is PlReference.NORMAL:
        q = stats.norm.ppf(0.5 + level / 2.0)
    else:
        q = stats.t.ppf(0.5 + level / 2.0, df=k)
    half = q * math.sqrt(var)
    return math.exp(log_theta - half), math.exp(log_theta + half)
