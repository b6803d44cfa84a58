"""Scenario definitions and data generation for coverage simulations.

A scenario fixes the effect measure, the study-size design, per-arm
size, study count, control-arm risk and the heterogeneity share I2.
Between-study heterogeneity tau is derived from I2 through the mean
expected within-study variance of the chosen log effect under the null.
Replicates are generated from counter-based random streams keyed by
(seed, replicate index), so results are independent of worker count
and execution order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import DomainError
from .tables import Measure, TwoByTwoTable

_P_CLAMP = 1e-8
_I2_LEVELS = (0.25, 0.5, 0.75, 0.9)
_TAU_TABLE_K = (2, 3, 5)


class Design(str, Enum):
    EQUAL = "EQUAL"
    ONE_SMALL = "ONE_SMALL"
    ONE_LARGE = "ONE_LARGE"


def _coerce_enum(enum_cls, value):
    if isinstance(value, enum_cls):
        return value
    try:
        return enum_cls(str(value).upper())
    except ValueError:
        raise DomainError(f"unknown {enum_cls.__name__} {value!r}") from None


@dataclass(frozen=True)
class ScenarioSpec:
    measure: Measure
    design: Design
    n_per_arm: int
    k: int
    p0: float
    i_squared: float
    level: float = 0.95
    reps: int = 2000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "measure", _coerce_enum(Measure, self.measure))
        object.__setattr__(self, "design", _coerce_enum(Design, self.design))
        if self.k < 2:
            raise DomainError("scenarios need at least two studies")
        if self.n_per_arm < 1:
            raise DomainError("per-arm size must be positive")
        if not 0.0 < self.p0 < 1.0:
            raise DomainError(f"control risk must be in (0, 1), got {self.p0}")
        if not 0.0 <= self.i_squared < 1.0:
            raise DomainError(f"I2 must be in [0, 1), got {self.i_squared}")
        if not 0.0 < self.level < 1.0:
            raise DomainError(f"level must be in (0, 1), got {self.level}")
        if self.reps < 1:
            raise DomainError("reps must be positive")
        if self.seed < 0:
            raise DomainError("seed must be non-negative")
        study_sizes(self.design, self.n_per_arm, self.k)  # validates divisibility


@dataclass(frozen=True)
class GeneratedMeta:
    tables: tuple[TwoByTwoTable, ...]
    true_mu: float
    tau_used: float
    per_study_theta: tuple[float, ...]
    clamp_count: int = 0


def study_sizes(design: Design, n: int, k: int) -> list[int]:
    """Per-arm sizes: k equal studies, or k-1 equal plus one odd study.

    The odd study (a tenth or ten times the size) is always last.
    """
    design = Design(design)
    if design is Design.EQUAL:
        return [n] * k
    if design is Design.ONE_SMALL:
        if n % 10 != 0:
            raise DomainError(f"one-small design needs n divisible by 10, got {n}")
        return [n] * (k - 1) + [n // 10]
    return [n] * (k - 1) + [10 * n]


def expected_within_variance(measure: Measure, n: int, p0: float) -> float:
    """Expected within-study variance of the log effect under the null.

    Expected counts n*p0 in both arms; two arms contribute twice the
    single-arm term.
    """
    if n < 1 or not 0.0 < p0 < 1.0:
        raise DomainError("need n >= 1 and p0 in (0, 1)")
    if Measure(measure) is Measure.OR:
        return 2.0 * (1.0 / (n * p0) + 1.0 / (n * (1.0 - p0)))
    return 2.0 * (1.0 - p0) / (n * p0)


def tau_from_i2(i2: float, variances: Sequence[float]) -> float:
    """Heterogeneity SD giving share i2 against the mean within-variance."""
    if not 0.0 <= i2 < 1.0:
        raise DomainError(f"I2 must be in [0, 1), got {i2}")
    if len(variances) == 0 or any(v <= 0 for v in variances):
        raise DomainError("variances must be positive and non-empty")
    return math.sqrt(i2 / (1.0 - i2) * float(np.mean(variances)))


def scenario_tau(spec: ScenarioSpec) -> float:
    """The tau implied by a scenario's I2 and size design."""
    sizes = study_sizes(spec.design, spec.n_per_arm, spec.k)
    variances = [expected_within_variance(spec.measure, m, spec.p0) for m in sizes]
    return tau_from_i2(spec.i_squared, variances)


def _rng(seed: int, replicate_index: int) -> np.random.Generator:
    # counter-based stream per replicate: identical under any worker split
    ss = np.random.SeedSequence(entropy=(seed, replicate_index))
    return np.random.Generator(np.random.Philox(ss))


def generate_meta(spec: ScenarioSpec, replicate_index: int) -> GeneratedMeta:
    """Draw one replicate dataset under the scenario's null (mu = 0).

    Study effects theta_i ~ N(0, tau^2) perturb the control risk on the
    chosen effect scale; risks are clamped away from 0 and 1 and clamp
    events counted.
    """
    if replicate_index < 0:
        raise DomainError("replicate index must be non-negative")
    sizes = np.array(study_sizes(spec.design, spec.n_per_arm, spec.k))
    tau = scenario_tau(spec)
    rng = _rng(spec.seed, replicate_index)
    theta = rng.normal(0.0, tau, size=spec.k)
    if spec.measure is Measure.RR:
        p1 = spec.p0 * np.exp(theta)
    else:
        odds = spec.p0 / (1.0 - spec.p0) * np.exp(theta)
        p1 = odds / (1.0 + odds)
    clamped = np.clip(p1, _P_CLAMP, 1.0 - _P_CLAMP)
    clamp_count = int(np.sum(clamped != p1))
    events_ctl = rng.binomial(sizes, spec.p0)
    events_trt = rng.binomial(sizes, clamped)
    tables = tuple(
        TwoByTwoTable(int(xt), int(n), int(xc), int(n))
        for xt, xc, n in zip(events_trt, events_ctl, sizes)
    )
    return GeneratedMeta(
        tables=tables,
        true_mu=0.0,
        tau_used=tau,
        per_study_theta=tuple(float(t) for t in theta),
        clamp_count=clamp_count,
    )


@dataclass(frozen=True)
class TauRow:
    k: int
    measure: Measure
    design: Design
    i_squared: float
    tau: float


def tau_table(n: int = 100, p0: float = 0.7) -> list[TauRow]:
    """Reference tau values for the standard k/measure/design/I2 grid."""
    rows = []
    for k in _TAU_TABLE_K:
        for measure in (Measure.OR, Measure.RR):
            for design in (Design.EQUAL, Design.ONE_SMALL, Design.ONE_LARGE):
                sizes = study_sizes(design, n, k)
                variances = [expected_within_variance(measure, m, p0) for m in sizes]
                for i2 in _I2_LEVELS:
                    rows.append(
                        TauRow(k, measure, design, i2, tau_from_i2(i2, variances))
                    )
    return rows
