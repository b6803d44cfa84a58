"""Method dispatch, coverage simulation and dataset analysis.

A method identifier names one pooling pipeline (estimator family plus
interval flavour).  The harness applies every requested method to each
replicate of a scenario, treating per-replicate failures as data:
non-converged replicates are excluded from coverage and length
aggregates and reported as a rate.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import bayes, glmm, nnhm, poisson_pl
from .errors import ConvergenceError, DomainError, ShapeError
from .simgen import ScenarioSpec, generate_meta, scenario_tau
from .tables import (
    Measure,
    MetaDataset,
    TwoByTwoTable,
    corrected_tables,
    study_estimates,
)

_NN_MODELS = {
    "NN-DL": nnhm.TauMethod.DL,
    "NN-ML": nnhm.TauMethod.ML,
    "NN-REML": nnhm.TauMethod.REML,
    "NN-EB": nnhm.TauMethod.EB,
}
_NN_INTERVALS = ("WALD", "HKSJ", "MHKSJ")
_BAYES_MODELS = {"BAYES-HN05": 0.5, "BAYES-HN10": 1.0}
_GLMM_MODELS = {
    "UM.FS": glmm.GlmmModel.UM_FS,
    "UM.RS": glmm.GlmmModel.UM_RS,
    "CM.AL": glmm.GlmmModel.CM_AL,
    "CM.EL": glmm.GlmmModel.CM_EL,
}
_GLMM_INTERVALS = ("WALD", "T")
_PL_INTERVALS = ("NORMAL", "T")


@dataclass(frozen=True)
class MethodId:
    """Canonical method identifier: model family plus interval kind."""

    model: str
    interval: str

    def __str__(self) -> str:
        if self.model in _BAYES_MODELS:
            return self.model
        return f"{self.model}/{self.interval}"

    @staticmethod
    def parse(text: str) -> "MethodId":
        raw = text.strip().upper()
        model, _, interval = raw.partition("/")
        if model in _BAYES_MODELS:
            if interval in ("", "HPD"):
                return MethodId(model, "HPD")
        elif model in _NN_MODELS:
            if interval in _NN_INTERVALS:
                return MethodId(model, interval)
        elif model in _GLMM_MODELS:
            if interval in _GLMM_INTERVALS:
                return MethodId(model, interval)
        elif model == "PN-PL":
            if interval in _PL_INTERVALS:
                return MethodId(model, interval)
        raise DomainError(f"unknown method id: {text!r}")

    def supports(self, measure: Measure) -> bool:
        if self.model in _GLMM_MODELS:
            return measure is Measure.OR
        if self.model == "PN-PL":
            return measure is Measure.RR
        return True


def all_method_ids() -> list[MethodId]:
    ids = [MethodId(m, i) for m in _NN_MODELS for i in _NN_INTERVALS]
    ids += [MethodId(m, "HPD") for m in _BAYES_MODELS]
    ids += [MethodId(m, i) for m in _GLMM_MODELS for i in _GLMM_INTERVALS]
    ids += [MethodId("PN-PL", i) for i in _PL_INTERVALS]
    return ids


@dataclass(frozen=True)
class MethodOutcome:
    """One method applied to one dataset; log-scale interval bounds."""

    est_log: float | None
    lower: float | None
    upper: float | None
    tau: float | None
    converged: bool
    note: str = ""


def _fail(note: str) -> MethodOutcome:
    return MethodOutcome(None, None, None, None, False, note)


def _apply_nn(tables, measure, method: MethodId, level: float) -> MethodOutcome:
    ests = study_estimates(tables, measure)
    het = nnhm.estimate_tau(ests, _NN_MODELS[method.model])
    if not het.converged:
        return _fail("tau estimation did not converge")
    if method.interval == "WALD":
        mu, se = nnhm.pool(ests, het.tau)
        res = nnhm.interval_wald(mu, se, level, tau_used=het.tau)
    else:
        res = nnhm.interval_hksj(
            ests, het.tau, level, modified=method.interval == "MHKSJ"
        )
    return MethodOutcome(res.mu_hat, res.lower, res.upper, het.tau, True)


def _apply_bayes(tables, measure, method: MethodId, level: float) -> MethodOutcome:
    ests = study_estimates(tables, measure)
    prior = bayes.HalfNormalPrior(_BAYES_MODELS[method.model])
    summary = bayes.mu_posterior(ests, prior, level=level)
    return MethodOutcome(
        summary.median,
        summary.hpd_lower,
        summary.hpd_upper,
        bayes.tau_median(summary.grid),
        True,
    )


def _apply_glmm(tables, measure, method: MethodId, level: float) -> MethodOutcome:
    fit = glmm.fit_glmm(tables, glmm.GlmmSpec(model=_GLMM_MODELS[method.model]))
    if not fit.converged:
        return _fail("glmm fit did not converge")
    kind = (
        glmm.GlmmIntervalKind.WALD
        if method.interval == "WALD"
        else glmm.GlmmIntervalKind.T
    )
    lower, upper = glmm.glmm_interval(fit, kind, level)
    return MethodOutcome(fit.beta_hat, lower, upper, fit.tau_hat, True)


def _apply_pl(tables, measure, method: MethodId, level: float) -> MethodOutcome:
    ct = corrected_tables(tables)
    log_theta, _ = poisson_pl.pl_point_estimate(ct)
    distr = (
        poisson_pl.PlReference.NORMAL
        if method.interval == "NORMAL"
        else poisson_pl.PlReference.T
    )
    lo, hi = poisson_pl.pl_interval(ct, log_theta, distr, level)
    tau = math.sqrt(poisson_pl.pl_tau2(ct, log_theta))
    # ratio-scale interval logged before aggregation
    return MethodOutcome(log_theta, math.log(lo), math.log(hi), tau, True)


def apply_method(
    tables: Sequence[TwoByTwoTable],
    measure: Measure,
    method: MethodId,
    level: float = 0.95,
) -> MethodOutcome:
    """Run one method on one dataset; failures become data, not raises."""
    measure = Measure(measure)
    if not method.supports(measure):
        return _fail(f"{method} does not support measure {measure.value}")
    try:
        if method.model in _NN_MODELS:
            return _apply_nn(tables, measure, method, level)
        if method.model in _BAYES_MODELS:
            return _apply_bayes(tables, measure, method, level)
        if method.model in _GLMM_MODELS:
            return _apply_glmm(tables, measure, method, level)
        return _apply_pl(tables, measure, method, level)
    except (ConvergenceError, DomainError, ShapeError, FloatingPointError) as exc:
        return _fail(str(exc))


@dataclass(frozen=True)
class MethodAggregate:
    coverage: float
    mean_length: float
    median_length: float
    nonconvergence_rate: float
    effective_reps: int


@dataclass(frozen=True)
class ScenarioResult:
    spec: ScenarioSpec
    tau: float
    methods: dict[str, MethodAggregate]


def coverage(
    outcomes: Sequence[MethodOutcome], true_mu: float = 0.0
) -> float:
    """Fraction of converged outcomes whose interval contains true_mu."""
    done = [o for o in outcomes if o.converged]
    if not done:
        raise DomainError("no converged replicates")
    hits = sum(1 for o in done if o.lower <= true_mu <= o.upper)
    return hits / len(done)


Runner = Callable[[Sequence[TwoByTwoTable], Measure, MethodId, float], MethodOutcome]


def _replicate_block(
    spec: ScenarioSpec,
    method_texts: tuple[str, ...],
    start: int,
    stop: int,
) -> list[list[tuple[bool, float, float]]]:
    """Outcomes for replicates [start, stop); module-level for pickling."""
    methods = [MethodId.parse(t) for t in method_texts]
    out = []
    for r in range(start, stop):
        meta = generate_meta(spec, r)
        row = []
        for m in methods:
            o = apply_method(meta.tables, spec.measure, m, spec.level)
            row.append(
                (o.converged, o.lower if o.converged else math.nan,
                 o.upper if o.converged else math.nan)
            )
        out.append(row)
    return out


def run_scenario(
    spec: ScenarioSpec,
    methods: Sequence[MethodId],
    workers: int = 1,
    runner: Runner | None = None,
) -> ScenarioResult:
    """Coverage and interval-length aggregates for one scenario cell.

    Aggregation runs in replicate order whatever the worker split, so
    output is byte-identical for any worker count.
    """
    if not methods:
        raise DomainError("at least one method required")
    for m in methods:
        if not m.supports(spec.measure):
            raise DomainError(
                f"{m} does not support measure {spec.measure.value}"
            )
    if workers < 1:
        raise DomainError("workers must be positive")

    reps = spec.reps
    if runner is not None:
        rows = []
        for r in range(reps):
            meta = generate_meta(spec, r)
            row = []
            for m in methods:
                o = runner(meta.tables, spec.measure, m, spec.level)
                row.append(
                    (o.converged, o.lower if o.converged else math.nan,
                     o.upper if o.converged else math.nan)
                )
            rows.append(row)
    elif workers == 1:
        rows = _replicate_block(spec, tuple(str(m) for m in methods), 0, reps)
    else:
        chunk = max(1, math.ceil(reps / (workers * 4)))
        spans = [(s, min(s + chunk, reps)) for s in range(0, reps, chunk)]
        rows = [None] * reps
        texts = tuple(str(m) for m in methods)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {
                pool.submit(_replicate_block, spec, texts, s, e): (s, e)
                for s, e in spans
            }
            for fut, (s, e) in futures.items():
                rows[s:e] = fut.result()

    aggregates = {}
    for j, m in enumerate(methods):
        conv = np.array([row[j][0] for row in rows], dtype=bool)
        lower = np.array([row[j][1] for row in rows], dtype=float)
        upper = np.array([row[j][2] for row in rows], dtype=float)
        eff = int(conv.sum())
        if eff == 0:
            agg = MethodAggregate(math.nan, math.nan, math.nan, 1.0, 0)
        else:
            hits = (lower[conv] <= 0.0) & (0.0 <= upper[conv])
            lengths = upper[conv] - lower[conv]
            agg = MethodAggregate(
                coverage=float(hits.mean()),
                mean_length=float(lengths.mean()),
                median_length=float(np.median(lengths)),
                nonconvergence_rate=1.0 - eff / reps,
                effective_reps=eff,
            )
        aggregates[str(m)] = agg
    return ScenarioResult(spec=spec, tau=scenario_tau(spec), methods=aggregates)


@dataclass(frozen=True)
class AnalysisRow:
    meta_id: str
    k: int
    measure: Measure
    method: str
    interval_kind: str
    est_log: float | None
    est_ratio: float | None
    lower_log: float | None
    upper_log: float | None
    length_log: float | None
    tau: float | None
    converged: bool
    ratio_vs_dl: float | None
    note: str = ""


def analyze_dataset(
    dataset: MetaDataset,
    measure: Measure,
    methods: Sequence[MethodId],
    level: float = 0.95,
) -> list[AnalysisRow]:
    """Apply each method to one dataset, one output row per method.

    Per-method failures are recorded in-row and never abort the run.
    The ratio_vs_dl column compares each point estimate against the
    moment-estimator baseline on the ratio scale.
    """
    measure = Measure(measure)
    baseline = None
    if dataset.k >= 2:
        try:
            ests = study_estimates(dataset.studies, measure)
            het = nnhm.estimate_tau(ests, nnhm.TauMethod.DL)
            baseline, _ = nnhm.pool(ests, het.tau)
        except (DomainError, ConvergenceError):
            baseline = None

    rows = []
    for m in methods:
        o = apply_method(dataset.studies, measure, m, level)
        rows.append(
            AnalysisRow(
                meta_id=dataset.id,
                k=dataset.k,
                measure=measure,
                method=m.model,
                interval_kind=m.interval,
                est_log=o.est_log,
                est_ratio=math.exp(o.est_log) if o.converged else None,
                lower_log=o.lower,
                upper_log=o.upper,
                length_log=(o.upper - o.lower) if o.converged else None,
                tau=o.tau,
                converged=o.converged,
                ratio_vs_dl=(
                    math.exp(o.est_log - baseline)
                    if o.converged and baseline is not None
                    else None
                ),
                note=o.note,
            )
        )
    return rows
