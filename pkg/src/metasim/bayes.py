"""Bayesian random-effects pooling with a half-normal heterogeneity prior.

The pooled effect gets an improper uniform prior and is integrated out
analytically, leaving a one-dimensional marginal posterior for the
between-study standard deviation tau.  That posterior is discretised on
an adaptive grid; the posterior of the pooled effect is then an exact
mixture of normals over the grid, from which moments, quantiles and the
highest-density interval are computed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize
from scipy.special import ndtr, ndtri

from .errors import ConvergenceError, DomainError, ShapeError
from .tables import StudyEstimate

_SUPPORT_MASS = 1e-6  # prior mass excluded beyond the grid's upper end
_HPD_MASS_TOL = 1e-6


@dataclass(frozen=True)
class HalfNormalPrior:
    """Half-normal distribution on tau >= 0 with the given scale."""

    scale: float

    def __post_init__(self):
        if self.scale <= 0:
            raise DomainError(f"prior scale must be positive, got {self.scale}")

    def log_density(self, tau):
        tau = np.asarray(tau, dtype=float)
        out = np.where(
            tau < 0,
            -np.inf,
            math.log(2.0) - 0.5 * math.log(2.0 * math.pi) - math.log(self.scale)
            - 0.5 * (tau / self.scale) ** 2,
        )
        return float(out) if out.ndim == 0 else out

    def cdf(self, tau: float) -> float:
        if tau < 0:
            return 0.0
        return float(2.0 * ndtr(tau / self.scale) - 1.0)

    def quantile(self, p):
        p_arr = np.asarray(p, dtype=float)
        if np.any((p_arr < 0.0) | (p_arr >= 1.0)):
            raise DomainError(f"quantile level must be in [0, 1), got {p}")
        out = self.scale * ndtri(0.5 + p_arr / 2.0)
        return float(out) if out.ndim == 0 else out


def prior_quantile(prior: HalfNormalPrior, p: float) -> float:
    """Quantile of the heterogeneity prior."""
    return prior.quantile(p)


@dataclass(frozen=True)
class GridControl:
    tolerance: float = 1e-6
    initial_nodes: int = 64
    max_nodes: int = 4096

    def __post_init__(self):
        if self.tolerance <= 0 or self.initial_nodes < 2:
            raise DomainError("grid control requires tolerance > 0 and >= 2 nodes")
        if self.max_nodes < self.initial_nodes:
            raise DomainError("max_nodes must be at least initial_nodes")


@dataclass(frozen=True)
class TauGrid:
    """Discretised marginal posterior of tau: nodes with trapezoid masses."""

    nodes: np.ndarray
    weights: np.ndarray
    upper: float


class MixturePosterior:
    """Finite normal mixture: the pooled-effect posterior given a tau grid."""

    def __init__(self, means, sds, weights):
        self.means = np.asarray(means, dtype=float)
        self.sds = np.asarray(sds, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        if np.any(self.sds <= 0) or np.any(self.weights < 0):
            raise DomainError("mixture requires positive sds and non-negative weights")
        total = self.weights.sum()
        if not math.isfinite(total) or total <= 0:
            raise DomainError("mixture weights must have positive finite mass")
        self.weights = self.weights / total
        # components below double-precision relevance only slow evaluation
        keep = self.weights > self.weights.max() * 1e-15
        if not keep.all():
            self.means = self.means[keep]
            self.sds = self.sds[keep]
            self.weights = self.weights[keep] / self.weights[keep].sum()
        self._mode: float | None = None

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        z = (x[..., None] - self.means) / self.sds
        d = np.exp(-0.5 * z**2) / (self.sds * math.sqrt(2.0 * math.pi))
        out = d @ self.weights
        return float(out) if out.ndim == 0 else out

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        z = (x[..., None] - self.means) / self.sds
        out = ndtr(z) @ self.weights
        return float(out) if out.ndim == 0 else out

    def mean(self) -> float:
        return float(self.weights @ self.means)

    def sd(self) -> float:
        m = self.mean()
        second = float(self.weights @ (self.means**2 + self.sds**2))
        return math.sqrt(max(second - m * m, 0.0))

    def support(self) -> tuple[float, float]:
        pad = 12.0 * float(self.sds.max())
        return float(self.means.min()) - pad, float(self.means.max()) + pad

    def quantile(self, p: float) -> float:
        if not 0.0 < p < 1.0:
            raise DomainError(f"quantile level must be in (0, 1), got {p}")
        lo, hi = self.support()
        return float(optimize.brentq(lambda x: self.cdf(x) - p, lo, hi, xtol=1e-12))

    def median(self) -> float:
        return self.quantile(0.5)

    def mode(self) -> float:
        if self._mode is not None:
            return self._mode
        lo, hi = self.support()
        grid = np.linspace(lo, hi, 1024)
        j = int(np.argmax(self.pdf(grid)))
        a = grid[max(j - 1, 0)]
        b = grid[min(j + 1, len(grid) - 1)]
        res = optimize.minimize_scalar(
            lambda x: -self.pdf(x), bounds=(a, b), method="bounded",
            options={"xatol": 1e-12},
        )
        self._mode = float(res.x)
        return self._mode


@dataclass(frozen=True)
class PosteriorSummary:
    mean: float
    median: float
    mode: float
    hpd_lower: float
    hpd_upper: float
    level: float
    grid: TauGrid
    mixture: MixturePosterior = field(repr=False, compare=False, default=None)


def _estimate_arrays(estimates: Sequence[StudyEstimate]):
    if len(estimates) < 1:
        raise DomainError("posterior requires at least one study")
    y = np.array([e.y for e in estimates], dtype=float)
    v = np.array([e.se**2 for e in estimates], dtype=float)
    if np.any(v <= 0):
        raise DomainError("study variances must be positive")
    return y, v


def tau_marginal_log_posterior(
    estimates: Sequence[StudyEstimate], prior: HalfNormalPrior, tau
):
    """Unnormalised log marginal posterior of tau (pooled effect integrated out)."""
    y, v = _estimate_arrays(estimates)
    tau_arr = np.atleast_1d(np.asarray(tau, dtype=float))
    marg = v[None, :] + tau_arr[:, None] ** 2
    w = 1.0 / marg
    sw = w.sum(axis=1)
    mu = (w * y[None, :]).sum(axis=1) / sw
    quad = (w * (y[None, :] - mu[:, None]) ** 2).sum(axis=1)
    logpost = (
        prior.log_density(tau_arr)
        - 0.5 * np.log(marg).sum(axis=1)
        - 0.5 * np.log(sw)
        - 0.5 * quad
    )
    return float(logpost[0]) if np.isscalar(tau) or np.ndim(tau) == 0 else logpost


def _conditional_moments(y, v, tau_arr):
    w = 1.0 / (v[None, :] + tau_arr[:, None] ** 2)
    sw = w.sum(axis=1)
    mu = (w * y[None, :]).sum(axis=1) / sw
    return mu, 1.0 / np.sqrt(sw)


def _node_weights(nodes, logpost):
    d = np.exp(logpost - logpost.max())
    gaps = np.diff(nodes)
    w = np.zeros_like(nodes)
    w[:-1] += 0.5 * d[:-1] * gaps
    w[1:] += 0.5 * d[1:] * gaps
    total = w.sum()
    if total <= 0 or not math.isfinite(total):
        raise DomainError("tau posterior has no mass on the grid")
    return w / total, d


def _interval_scores(nodes, d, cmean, csd):
    # mass x variation product per interval; bounds the moment shift that
    # refining the interval could still cause
    gaps = np.diff(nodes)
    mass = 0.5 * (d[:-1] + d[1:]) * gaps
    total = mass.sum()
    if total > 0:
        mass = mass / total
    variation = np.maximum(np.abs(np.diff(cmean)), np.abs(np.diff(csd)))
    return mass * variation


def mu_posterior(
    estimates: Sequence[StudyEstimate],
    prior: HalfNormalPrior,
    control: GridControl = GridControl(),
    level: float = 0.95,
) -> PosteriorSummary:
    """Posterior summary of the pooled effect.

    Builds an adaptive tau grid (nodes at prior-mass quantiles, refined
    by bisecting the interval with the largest mass-times-variation
    score until the implied moment error is below tolerance), then
    summarises the resulting normal mixture.

    Raises
    ------
    ConvergenceError
        If the node cap is reached before the tolerance is met.
    """
    if not 0.0 < level < 1.0:
        raise DomainError(f"credible level must be in (0, 1), got {level}")
    y, v = _estimate_arrays(estimates)
    upper = prior.quantile(1.0 - _SUPPORT_MASS)

    probs = np.linspace(0.0, 1.0 - _SUPPORT_MASS, control.initial_nodes)
    nodes = np.asarray(prior.quantile(probs))
    logpost = np.asarray(tau_marginal_log_posterior(estimates, prior, nodes))
    cmean, csd = _conditional_moments(y, v, nodes)

    while True:
        weights, d = _node_weights(nodes, logpost)
        mix_sd = math.sqrt(
            max(
                float(weights @ (cmean**2 + csd**2)) - float(weights @ cmean) ** 2,
                0.0,
            )
        )
        scale = max(mix_sd, 1e-12)
        scores = _interval_scores(nodes, d, cmean, csd)
        bad = np.flatnonzero(scores > control.tolerance * scale)
        if bad.size == 0:
            break
        if len(nodes) >= control.max_nodes:
            raise ConvergenceError(
                f"tau grid hit the {control.max_nodes}-node cap before tolerance"
            )
        # split every offending interval this pass, worst first up to the cap
        room = control.max_nodes - len(nodes)
        if bad.size > room:
            bad = bad[np.argsort(scores[bad])[::-1][:room]]
            bad.sort()
        mids = 0.5 * (nodes[bad] + nodes[bad + 1])
        lp = np.asarray(tau_marginal_log_posterior(estimates, prior, mids))
        cm, cs = _conditional_moments(y, v, mids)
        at = bad + 1
        nodes = np.insert(nodes, at, mids)
        logpost = np.insert(logpost, at, lp)
        cmean = np.insert(cmean, at, cm)
        csd = np.insert(csd, at, cs)

    grid = TauGrid(nodes=nodes, weights=weights, upper=upper)
    mixture = MixturePosterior(cmean, csd, weights)
    hpd_lo, hpd_hi = hpd_interval(mixture, level)
    return PosteriorSummary(
        mean=mixture.mean(),
        median=mixture.median(),
        mode=mixture.mode(),
        hpd_lower=hpd_lo,
        hpd_upper=hpd_hi,
        level=level,
        grid=grid,
        mixture=mixture,
    )


def _crossing(mixture: MixturePosterior, cut: float, start: float, direction: int):
    """Walk from the mode until the density falls below the cut, then root-find."""
    step = max(float(mixture.sds.max()), 1e-12)
    lo, hi = mixture.support()
    x = start
    for _ in range(400):
        nxt = x + direction * step
        nxt = min(max(nxt, lo), hi)
        if mixture.pdf(nxt) < cut:
            a, b = (nxt, x) if direction < 0 else (x, nxt)
            return float(optimize.brentq(lambda t: mixture.pdf(t) - cut, a, b, xtol=1e-13))
        if nxt in (lo, hi):
            return float(nxt)
        x = nxt
        step *= 1.6
    raise ConvergenceError("could not bracket the density cut")


def hpd_interval(
    mixture: MixturePosterior, level: float = 0.95, mass_tol: float = _HPD_MASS_TOL
) -> tuple[float, float]:
    """Highest-density interval of a normal mixture.

    Bisects the density cut level; the interval is the superlevel set
    around the mode, whose mass is matched to `level` within `mass_tol`.

    Raises
    ------
    ShapeError
        If the superlevel set at the solution cut is disconnected.
    """
    if not 0.0 < level < 1.0:
        raise DomainError(f"credible level must be in (0, 1), got {level}")
    mode = mixture.mode()
    f_mode = mixture.pdf(mode)
    c_lo, c_hi = f_mode * 1e-15, f_mode
    lower = upper = mode
    for _ in range(200):
        c = 0.5 * (c_lo + c_hi)
        lower = _crossing(mixture, c, mode, -1)
        upper = _crossing(mixture, c, mode, +1)
        mass = mixture.cdf(upper) - mixture.cdf(lower)
        if abs(mass - level) <= mass_tol:
            break
        if mass > level:
            c_lo = c
        else:
            c_hi = c
    else:
        # a disconnected region caps the mass any connected interval can
        # reach, which is the usual reason the bisection stalls
        if _count_islands(mixture, c) > 1:
            raise ShapeError(
                "highest-density region at the requested level is disconnected"
            )
        raise ConvergenceError("highest-density cut bisection did not converge")

    if _count_islands(mixture, c) > 1:
        raise ShapeError("superlevel set at the solution cut is disconnected")
    return lower, upper


def _count_islands(mixture: MixturePosterior, cut: float) -> int:
    # density can only clear the cut within a few sds of some component
    lo_s = float(np.min(mixture.means - 9.0 * mixture.sds))
    hi_s = float(np.max(mixture.means + 9.0 * mixture.sds))
    xs = np.linspace(lo_s, hi_s, 1024)
    above = mixture.pdf(xs) >= cut
    return int(np.sum(np.diff(above.astype(int)) == 1)) + int(above[0])


def tau_median(grid: TauGrid) -> float:
    """Posterior median of tau from the discretised marginal."""
    cum = np.cumsum(grid.weights)
    cum = cum / cum[-1]
    return float(np.interp(0.5, cum, grid.nodes))
