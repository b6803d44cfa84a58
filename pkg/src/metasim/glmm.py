"""Binomial generalized linear mixed models for log odds ratios.

Four marginal likelihoods over raw 2x2 counts, all integrating the
random study effect by Gauss-Hermite quadrature:

* fixed study intercepts, random treatment effect (treatment coded 0/1)
* random study intercept and random treatment effect (coded -1/2, +1/2)
* conditional binomial likelihood with an approximate allocation logit
* exact conditional likelihood via Fisher's noncentral hypergeometric

The treatment-effect standard deviation (and the intercept standard
deviation where present) is optimized on the log scale by a
quasi-Newton search with numeric gradients.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import optimize
from scipy.special import gammaln, logsumexp

from .errors import DomainError
from .tables import Measure, MetaDataset, TwoByTwoTable, study_estimates

_LOG_SD_LO = math.log(1e-6)
_LOG_SD_HI = math.log(50.0)
_TAU_FLOOR = 1e-5  # estimates at or below are reported as exactly zero
_SNAP_TRIGGER = 0.05  # below this, try pinning the component at zero
_SNAP_LL_TOL = 1e-7  # pinned fit accepted when within this of the free fit
_HESS_STEP = 1e-5


class GlmmModel(str, Enum):
    UM_FS = "um_fs"
    UM_RS = "um_rs"
    CM_AL = "cm_al"
    CM_EL = "cm_el"


class GlmmIntervalKind(str, Enum):
    WALD = "wald"
    T = "t"


@dataclass(frozen=True)
class GlmmSpec:
    model: GlmmModel
    quad_order: int = 15
    max_iter: int = 200
    tol: float = 1e-8
    tau_fixed: float | None = None

    def __post_init__(self):
        if self.quad_order < 1:
            raise DomainError("quad_order must be at least 1")
        if self.tau_fixed is not None and self.tau_fixed < 0:
            raise DomainError("tau_fixed must be non-negative")


@dataclass(frozen=True)
class GlmmFit:
    model: GlmmModel
    beta_hat: float
    tau_hat: float
    sigma_u_hat: float | None
    se_beta: float
    loglik: float
    converged: bool
    iterations: int
    n_studies: int


def gauss_hermite_rule(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for expectations against a standard normal.

    Weights sum to one and integrate polynomials up to degree
    2*order - 1 exactly, so the second moment of the rule is 1 for
    order >= 2.
    """
    if order < 1:
        raise DomainError("quadrature order must be at least 1")
    nodes, weights = hermegauss(order)
    return nodes, weights / weights.sum()


def nchg_log_pmf(x1: int, t: int, n1: int, n0: int, psi: float) -> float:
    """Log pmf of Fisher's noncentral hypergeometric distribution.

    Number of treatment-arm events x1 out of t total events, arm sizes
    n1 and n0, odds ratio psi.  Normalised by log-sum-exp over the
    support, so large psi and large tables stay finite.
    """
    if psi <= 0:
        raise DomainError(f"odds ratio must be positive, got {psi}")
    lo, hi = max(0, t - n0), min(t, n1)
    if lo > hi:
        raise DomainError(f"empty support for t={t}, n1={n1}, n0={n0}")
    if not lo <= x1 <= hi:
        raise DomainError(f"x1={x1} outside support [{lo}, {hi}]")
    j = np.arange(lo, hi + 1)
    terms = (
        _log_choose(n1, j) + _log_choose(n0, t - j) + j * math.log(psi)
    )
    return float(terms[x1 - lo] - logsumexp(terms))


def _log_choose(n, j):
    return gammaln(n + 1) - gammaln(j + 1) - gammaln(n - j + 1)


def _log_binom_pmf(x, n, eta):
    """Binomial log pmf with logit-scale success probability (stable)."""
    # log p = -softplus(-eta), log(1-p) = -softplus(eta)
    return (
        _log_choose(n, x)
        - x * np.logaddexp(0.0, -eta)
        - (n - x) * np.logaddexp(0.0, eta)
    )


class _Data:
    def __init__(self, tables: Sequence[TwoByTwoTable]):
        self.xt = np.array([t.events_trt for t in tables], dtype=float)
        self.nt = np.array([t.size_trt for t in tables], dtype=float)
        self.xc = np.array([t.events_ctl for t in tables], dtype=float)
        self.nc = np.array([t.size_ctl for t in tables], dtype=float)
        self.k = len(tables)
        self.t_events = self.xt + self.xc


def _loglik_um_fs(d: _Data, beta, alphas, tau, z, logw):
    ll = float(_log_binom_pmf(d.xc, d.nc, alphas).sum())
    eta = alphas[:, None] + beta + tau * z[None, :]
    lt = _log_binom_pmf(d.xt[:, None], d.nt[:, None], eta)
    return ll + float(logsumexp(logw[None, :] + lt, axis=1).sum())


def _loglik_um_rs(d: _Data, beta, alpha, sigma_u, tau, z, logw):
    zu = z[:, None]
    zb = z[None, :]
    lw2 = logw[:, None] + logw[None, :]
    eta_t = alpha + sigma_u * zu + 0.5 * (beta + tau * zb)
    eta_c = alpha + sigma_u * zu - 0.5 * (beta + tau * zb)
    total = 0.0
    for i in range(d.k):
        li = (
            _log_binom_pmf(d.xt[i], d.nt[i], eta_t)
            + _log_binom_pmf(d.xc[i], d.nc[i], eta_c)
        )
        total += float(logsumexp(lw2 + li))
    return total


def _loglik_cm_al(d: _Data, beta, tau, z, logw):
    offset = np.log(d.nt / d.nc)
    eta = beta + tau * z[None, :] + offset[:, None]
    lt = _log_binom_pmf(d.xt[:, None], d.t_events[:, None], eta)
    return float(logsumexp(logw[None, :] + lt, axis=1).sum())


def _loglik_cm_el(d: _Data, beta, tau, z, logw):
    total = 0.0
    for i in range(d.k):
        t = int(d.t_events[i])
        n1, n0 = int(d.nt[i]), int(d.nc[i])
        lo, hi = max(0, t - n0), min(t, n1)
        j = np.arange(lo, hi + 1, dtype=float)
        base = _log_choose(n1, j) + _log_choose(n0, t - j)
        logpsi = beta + tau * z  # per node
        terms = base[:, None] + j[:, None] * logpsi[None, :]
        lognorm = logsumexp(terms, axis=0)
        x1 = int(d.xt[i])
        lpmf = terms[x1 - lo, :] - lognorm
        total += float(logsumexp(logw + lpmf))
    return total


class _Objective:
    """Maps an optimizer vector to the model log-likelihood.

    Vector layouts (variance components on the log-SD scale, appended
    only when free):
      UM_FS: [beta, alpha_1..alpha_k, (log tau)]
      UM_RS: [beta, alpha, log sigma_u, (log tau)]
      CM_AL/CM_EL: [beta, (log tau)]
    """

    def __init__(self, d: _Data, model: GlmmModel, quad_order: int,
                 tau_fixed: float | None, sigma_u_fixed: float | None = None):
        self.d = d
        self.model = model
        self.z, w = gauss_hermite_rule(quad_order)
        self.logw = np.log(w)
        self.tau_fixed = tau_fixed
        self.sigma_u_fixed = sigma_u_fixed

    @property
    def tau_free(self) -> bool:
        return self.tau_fixed is None

    @property
    def sigma_free(self) -> bool:
        return self.model is GlmmModel.UM_RS and self.sigma_u_fixed is None

    def n_params(self) -> int:
        base = {
            GlmmModel.UM_FS: 1 + self.d.k,
            GlmmModel.UM_RS: 2 + (1 if self.sigma_free else 0),
            GlmmModel.CM_AL: 1,
            GlmmModel.CM_EL: 1,
        }[self.model]
        return base + (1 if self.tau_free else 0)

    def unpack(self, x: np.ndarray):
        beta = x[0]
        tau = math.exp(x[-1]) if self.tau_free else self.tau_fixed
        if self.model is GlmmModel.UM_FS:
            alphas = x[1 : 1 + self.d.k]
            return beta, {"alphas": alphas}, tau
        if self.model is GlmmModel.UM_RS:
            alpha = x[1]
            sigma_u = math.exp(x[2]) if self.sigma_free else self.sigma_u_fixed
            return beta, {"alpha": alpha, "sigma_u": sigma_u}, tau
        return beta, {}, tau

    def loglik(self, x: np.ndarray) -> float:
        beta, extra, tau = self.unpack(np.asarray(x, dtype=float))
        if self.model is GlmmModel.UM_FS:
            return _loglik_um_fs(self.d, beta, extra["alphas"], tau, self.z, self.logw)
        if self.model is GlmmModel.UM_RS:
            return _loglik_um_rs(
                self.d, beta, extra["alpha"], extra["sigma_u"], tau, self.z, self.logw
            )
        if self.model is GlmmModel.CM_AL:
            return _loglik_cm_al(self.d, beta, tau, self.z, self.logw)
        return _loglik_cm_el(self.d, beta, tau, self.z, self.logw)

    def neg(self, x: np.ndarray) -> float:
        return -self.loglik(x)

    def bounds(self):
        b = [(-30.0, 30.0)]
        if self.model is GlmmModel.UM_FS:
            b += [(-30.0, 30.0)] * self.d.k
        elif self.model is GlmmModel.UM_RS:
            b += [(-30.0, 30.0)]
            if self.sigma_free:
                b += [(_LOG_SD_LO, _LOG_SD_HI)]
        if self.tau_free:
            b += [(_LOG_SD_LO, _LOG_SD_HI)]
        return b

    def start(self, tau0: float, beta0: float, alpha0: np.ndarray, sigma0: float):
        x = [beta0]
        if self.model is GlmmModel.UM_FS:
            x += list(alpha0)
        elif self.model is GlmmModel.UM_RS:
            x += [float(alpha0.mean())]
            if self.sigma_free:
                x += [math.log(max(sigma0, 1e-3))]
        if self.tau_free:
            x += [math.log(max(tau0, 1e-3))]
        return np.array(x, dtype=float)


def _central_hessian(f, x: np.ndarray) -> np.ndarray:
    n = len(x)
    h = _HESS_STEP * np.maximum(1.0, np.abs(x))
    hess = np.empty((n, n))
    f0 = f(x)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h[i]
        hess[i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = h[j]
            hess[i, j] = hess[j, i] = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4.0 * h[i] * h[j])
    return hess


def _se_beta_from_info(info: np.ndarray) -> tuple[float, bool]:
    """Standard error of beta from the observed information (beta first)."""
    try:
        np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        return math.nan, False
    cov = np.linalg.inv(info)
    var = cov[0, 0]
    if not math.isfinite(var) or var <= 0:
        return math.nan, False
    return math.sqrt(var), True


def _starts(tables: Sequence[TwoByTwoTable]):
    ests = study_estimates(tables, Measure.OR)
    y = np.array([e.y for e in ests])
    w = np.array([1.0 / e.se**2 for e in ests])
    beta0 = float((w * y).sum() / w.sum())
    xc = np.array([t.events_ctl for t in tables], dtype=float)
    nc = np.array([t.size_ctl for t in tables], dtype=float)
    alpha0 = np.log((xc + 0.5) / (nc - xc + 0.5))
    sigma0 = float(alpha0.std()) if len(alpha0) > 1 else 0.3
    return beta0, alpha0, max(sigma0, 0.1)


def fit_glmm(data, spec: GlmmSpec) -> GlmmFit:
    """Fit one of the binomial GLMMs to raw study tables.

    Multi-start quasi-Newton maximisation; a treatment-effect SD that
    lands at the lower bound is snapped to zero and the model refit
    with it pinned, so the observed information stays positive
    definite.  Failures are reported through converged=False rather
    than raised: the simulation harness treats them as data.
    """
    tables = tuple(data.studies) if isinstance(data, MetaDataset) else tuple(data)
    if len(tables) == 0:
        raise DomainError("at least one study required")
    if len(tables) < 2 and spec.tau_fixed != 0.0:
        raise DomainError("a single study is only identified with tau_fixed=0")
    d = _Data(tables)
    beta0, alpha0, sigma0 = _starts(tables)

    tau_starts = [0.1, 0.01, 0.5] if spec.tau_fixed is None else [spec.tau_fixed]
    best = None
    iterations = 0
    for tau0 in tau_starts:
        obj = _Objective(d, spec.model, spec.quad_order, spec.tau_fixed)
        x0 = obj.start(tau0, beta0, alpha0, sigma0)
        res = optimize.minimize(
            obj.neg,
            x0,
            method="L-BFGS-B",
            bounds=obj.bounds(),
            options={"maxiter": spec.max_iter, "ftol": 1e-13, "gtol": 1e-9},
        )
        iterations += int(res.nit)
        if best is None or res.fun < best[1].fun:
            best = (obj, res)
        if res.success:
            break
    obj, res = best

    beta, extra, tau = obj.unpack(res.x)
    sigma_u = extra.get("sigma_u")
    opt_ok = bool(res.success)

    # A variance component in the flat near-zero region leaves the
    # observed information singular along its log-SD direction.  Refit
    # with the component pinned at zero and keep the pinned fit when
    # it matches the free optimum; a genuinely better free fit stays.
    snap_tau = obj.tau_free and tau <= _SNAP_TRIGGER
    snap_sigma = obj.sigma_free and sigma_u is not None and sigma_u <= _SNAP_TRIGGER
    if snap_tau or snap_sigma:
        pinned = _Objective(
            d,
            spec.model,
            spec.quad_order,
            0.0 if snap_tau else spec.tau_fixed,
            sigma_u_fixed=0.0 if snap_sigma else None,
        )
        x0 = np.array(
            [res.x[i] for i in _kept_indices(spec.model, len(res.x), snap_tau, snap_sigma)]
        )
        pres = optimize.minimize(
            pinned.neg,
            x0,
            method="L-BFGS-B",
            bounds=pinned.bounds(),
            options={"maxiter": spec.max_iter, "ftol": 1e-13, "gtol": 1e-9},
        )
        iterations += int(pres.nit)
        # Acceptance goes by objective value alone: starting at the free
        # optimum can abort the line search before any success flag.
        if pres.fun <= res.fun + _SNAP_LL_TOL:
            obj, res = pinned, pres
            beta, extra, tau = obj.unpack(res.x)
            sigma_u = extra.get("sigma_u")

    info = _central_hessian(obj.neg, np.asarray(res.x, dtype=float))
    se_beta, info_ok = _se_beta_from_info(info)

    tau_out = 0.0 if tau <= _TAU_FLOOR else float(tau)
    sigma_out = None
    if spec.model is GlmmModel.UM_RS:
        sigma_out = 0.0 if (sigma_u or 0.0) <= _TAU_FLOOR else float(sigma_u)
    return GlmmFit(
        model=spec.model,
        beta_hat=float(beta),
        tau_hat=tau_out,
        sigma_u_hat=sigma_out,
        se_beta=se_beta,
        loglik=-float(res.fun),
        converged=opt_ok and info_ok,
        iterations=iterations,
        n_studies=d.k,
    )


def _kept_indices(model: GlmmModel, n: int, snap_tau: bool, snap_sigma: bool):
    drop = set()
    if snap_tau:
        drop.add(n - 1)
    if snap_sigma and model is GlmmModel.UM_RS:
        drop.add(2)
    return [i for i in range(n) if i not in drop]


def glmm_interval(
    fit: GlmmFit, kind: GlmmIntervalKind, level: float = 0.95
) -> tuple[float, float]:
    """Confidence interval for the pooled log odds ratio.

    WALD uses the normal quantile; T uses t with k-1 degrees of
    freedom.
    """
    from scipy import stats

    if not 0.0 < level < 1.0:
        raise DomainError(f"confidence level must be in (0, 1), got {level}")
    if not fit.converged:
        raise DomainError("interval undefined for a non-converged fit")
    kind = GlmmIntervalKind(kind)
    if kind is GlmmIntervalKind.WALD:
        q = stats.norm.ppf(0.5 + level / 2.0)
    else:
        if fit.n_studies < 2:
            raise DomainError("t interval requires at least two studies")
        q = stats.t.ppf(0.5 + level / 2.0, df=fit.n_studies - 1)
    return fit.beta_hat - q * fit.se_beta, fit.beta_hat + q * fit.se_beta
