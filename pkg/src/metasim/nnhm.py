"""Random-effects pooling under the normal-normal hierarchical model.

Study estimates y_i are modelled as N(mu, se_i^2 + tau^2).  The module
estimates the between-study standard deviation tau, pools with inverse
marginal-variance weights and builds Wald or Hartung-Knapp-Sidik-Jonkman
style confidence intervals for mu.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from scipy import optimize, stats

from .errors import DomainError
from .tables import StudyEstimate

_TAU2_TOL = 1e-10
_MAX_ITER = 100


class TauMethod(str, Enum):
    DL = "dl"
    ML = "ml"
    REML = "reml"
    EB = "eb"


class IntervalKind(str, Enum):
    WALD = "wald"
    HKSJ = "hksj"
    MHKSJ = "mhksj"
    T = "t"
    HPD = "hpd"
    NORMAL = "normal"


@dataclass(frozen=True)
class HeterogeneityEstimate:
    tau: float
    method: TauMethod
    iterations: int
    converged: bool
    tolerance: float


@dataclass(frozen=True)
class PooledResult:
    mu_hat: float
    se_mu: float
    lower: float
    upper: float
    level: float
    interval_kind: IntervalKind
    tau_used: float
    df: int | None = None


def _arrays(estimates: Sequence[StudyEstimate]) -> tuple[np.ndarray, np.ndarray]:
    if len(estimates) < 2:
        raise DomainError("pooling requires at least two studies")
    y = np.array([e.y for e in estimates], dtype=float)
    v = np.array([e.se**2 for e in estimates], dtype=float)
    if np.any(v <= 0):
        raise DomainError("study variances must be positive")
    return y, v


def cochran_q(estimates: Sequence[StudyEstimate]) -> tuple[float, float]:
    """Cochran's Q statistic and the fixed-effect mean it is built on."""
    y, v = _arrays(estimates)
    w = 1.0 / v
    mu = float(np.sum(w * y) / np.sum(w))
    q = float(np.sum(w * (y - mu) ** 2))
    return q, mu


def _profile_terms(y: np.ndarray, v: np.ndarray, tau2: float):
    """Weights, pooled mean and weighted residual sum at a given tau^2."""
    w = 1.0 / (v + tau2)
    sw = w.sum()
    mu = float((w * y).sum() / sw)
    r = y - mu
    return w, sw, mu, r


def _ml_score(y, v, tau2):
    w, _, _, r = _profile_terms(y, v, tau2)
    return 0.5 * float((w**2 * r**2).sum() - w.sum())


def _reml_score(y, v, tau2):
    w, sw, _, r = _profile_terms(y, v, tau2)
    return 0.5 * float((w**2 * r**2).sum() - w.sum() + (w**2).sum() / sw)


def _ml_loglik(y, v, tau2):
    w, _, _, r = _profile_terms(y, v, tau2)
    return -0.5 * float(np.log(v + tau2).sum() + (w * r**2).sum())


def _reml_loglik(y, v, tau2):
    w, sw, _, r = _profile_terms(y, v, tau2)
    return -0.5 * float(np.log(v + tau2).sum() + math.log(sw) + (w * r**2).sum())


def generalized_q(estimates: Sequence[StudyEstimate], tau2: float) -> float:
    """Weighted residual sum with inverse marginal-variance weights."""
    y, v = _arrays(estimates)
    w, _, _, r = _profile_terms(y, v, tau2)
    return float((w * r**2).sum())


def _tau2_upper(y: np.ndarray) -> float:
    spread = float(np.max(np.abs(y - y.mean()))) if len(y) else 0.0
    return max((10.0 * spread) ** 2, 1e-8)


def _maximize_then_polish(y, v, loglik, score) -> tuple[float, int, bool]:
    """Bounded 1-D maximization over tau^2 with a score-root polish.

    The bounded search localises the optimum; when an interior root of
    the analytic score brackets there, brentq sharpens it to machine
    precision.  Boundary solutions are returned as exactly 0.
    """
    if score(y, v, 0.0) <= 0.0:
        return 0.0, 0, True
    hi = _tau2_upper(y)
    res = optimize.minimize_scalar(
        lambda t2: -loglik(y, v, t2),
        bounds=(0.0, hi),
        method="bounded",
        options={"xatol": _TAU2_TOL, "maxiter": _MAX_ITER},
    )
    t2 = float(res.x)
    iterations = int(res.nfev)
    converged = bool(res.success)
    lo, up = 0.25 * t2, 4.0 * t2 + 1e-8
    if score(y, v, lo) > 0.0 > score(y, v, up):
        t2 = float(optimize.brentq(lambda t: score(y, v, t), lo, up, xtol=1e-13))
        converged = True
    if loglik(y, v, 0.0) >= loglik(y, v, t2):
        t2 = 0.0
    return t2, iterations, converged


def estimate_tau(
    estimates: Sequence[StudyEstimate],
    method: TauMethod,
    tol: float = _TAU2_TOL,
    max_iter: int = _MAX_ITER,
) -> HeterogeneityEstimate:
    """Estimate the between-study standard deviation.

    DL is the closed-form moment estimator; EB solves the generalized
    Q equation by bracketed root finding; ML and REML maximise the
    marginal and restricted profile likelihoods.  All estimates are
    truncated at zero.
    """
    method = TauMethod(method)
    y, v = _arrays(estimates)
    k = len(y)

    if method is TauMethod.DL:
        q, _ = cochran_q(estimates)
        w = 1.0 / v
        denom = float(w.sum() - (w**2).sum() / w.sum())
        tau2 = max(0.0, (q - (k - 1)) / denom)
        return HeterogeneityEstimate(math.sqrt(tau2), method, 0, True, tol)

    if method is TauMethod.EB:
        target = float(k - 1)

        def gap(t2):
            w, _, _, r = _profile_terms(y, v, t2)
            return float((w * r**2).sum()) - target

        if gap(0.0) <= 0.0:
            return HeterogeneityEstimate(0.0, method, 0, True, tol)
        hi = max(_tau2_upper(y), 1.0)
        it = 0
        while gap(hi) > 0.0 and it < max_iter:
            hi *= 4.0
            it += 1
        if gap(hi) > 0.0:
            return HeterogeneityEstimate(math.sqrt(hi), method, it, False, tol)
        t2, info = optimize.brentq(
            gap, 0.0, hi, xtol=1e-13, maxiter=max_iter, full_output=True
        )
        return HeterogeneityEstimate(
            math.sqrt(float(t2)), method, it + info.iterations, info.converged, tol
        )

    loglik = _ml_loglik if method is TauMethod.ML else _reml_loglik
    score = _ml_score if method is TauMethod.ML else _reml_score
    t2, iterations, converged = _maximize_then_polish(y, v, loglik, score)
    return HeterogeneityEstimate(math.sqrt(t2), method, iterations, converged, tol)


def pool(estimates: Sequence[StudyEstimate], tau: float) -> tuple[float, float]:
    """Inverse marginal-variance pooled mean and its standard error."""
    y, v = _arrays(estimates)
    if tau < 0:
        raise DomainError("tau must be non-negative")
    w = 1.0 / (v + tau**2)
    sw = float(w.sum())
    return float((w * y).sum() / sw), math.sqrt(1.0 / sw)


def interval_wald(
    mu_hat: float,
    se_mu: float,
    level: float = 0.95,
    tau_used: float = 0.0,
) -> PooledResult:
    """Normal-quantile confidence interval for the pooled mean."""
    _check_level(level)
    z = stats.norm.ppf(0.5 + level / 2.0)
    return PooledResult(
        mu_hat=mu_hat,
        se_mu=se_mu,
        lower=mu_hat - z * se_mu,
        upper=mu_hat + z * se_mu,
        level=level,
        interval_kind=IntervalKind.WALD,
        tau_used=tau_used,
    )


def interval_hksj(
    estimates: Sequence[StudyEstimate],
    tau: float,
    level: float = 0.95,
    modified: bool = False,
) -> PooledResult:
    """Hartung-Knapp-Sidik-Jonkman interval with t(k-1) quantile.

    The Wald variance is rescaled by q = generalized Q / (k-1); the
    modified variant floors the scale at 1 so it can never undercut the
    t-based Wald interval.
    """
    _check_level(level)
    y, v = _arrays(estimates)
    if tau < 0:
        raise DomainError("tau must be non-negative")
    k = len(y)
    w, sw, mu, r = _profile_terms(y, v, tau**2)
    q = float((w * r**2).sum()) / (k - 1)
    scale = max(q, 1.0) if modified else q
    se = math.sqrt(scale / sw)
    t = stats.t.ppf(0.5 + level / 2.0, df=k - 1)
    return PooledResult(
        mu_hat=mu,
        se_mu=se,
        lower=mu - t * se,
        upper=mu + t * se,
        level=level,
        interval_kind=IntervalKind.MHKSJ if modified else IntervalKind.HKSJ,
        tau_used=tau,
        df=k - 1,
    )


def i_squared(estimates: Sequence[StudyEstimate], tau: float) -> float:
    """Share of total variance due to heterogeneity.

    Uses the typical within-study variance built from inverse-variance
    weights, so the value lies in [0, 1) and is 0 exactly when tau is 0.
    """
    y, v = _arrays(estimates)
    if tau < 0:
        raise DomainError("tau must be non-negative")
    k = len(y)
    w = 1.0 / v
    sw = float(w.sum())
    typical = (k - 1) * sw / (sw**2 - float((w**2).sum()))
    return tau**2 / (typical + tau**2)


def _check_level(level: float) -> None:
    if not 0.0 < level < 1.0:
        raise DomainError(f"confidence level must be in (0, 1), got {level}")
