"""2x2 contingency tables and per-study effect estimates.

A study compares a treatment arm against a control arm with binary
outcomes, summarised by event counts and arm sizes.  Effects are
expressed on the log scale as log odds ratios or log risk ratios with
their large-sample standard errors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

from .errors import DomainError


class Measure(str, Enum):
    """Effect measure; estimates are carried on the log scale."""

    OR = "OR"
    RR = "RR"


@dataclass(frozen=True)
class TwoByTwoTable:
    """Raw integer counts for one study."""

    events_trt: int
    size_trt: int
    events_ctl: int
    size_ctl: int

    def __post_init__(self):
        validate_table(self)


@dataclass(frozen=True)
class CorrectedTable:
    """Real-valued counts after an optional continuity correction."""

    events_trt: float
    size_trt: float
    events_ctl: float
    size_ctl: float
    corrected: bool = False


@dataclass(frozen=True)
class StudyEstimate:
    """Log-scale effect estimate with standard error for one study."""

    y: float
    se: float
    measure: Measure
    corrected: bool


@dataclass(frozen=True)
class MetaDataset:
    """A named collection of studies analysed jointly."""

    id: str
    studies: tuple[TwoByTwoTable, ...]

    @property
    def k(self) -> int:
        return len(self.studies)


def validate_table(table) -> None:
    """Check count sanity on any object carrying the four count fields.

    Raises
    ------
    DomainError
        If sizes are not positive or events fall outside [0, size].
    """
    for arm in ("trt", "ctl"):
        n = getattr(table, f"size_{arm}")
        x = getattr(table, f"events_{arm}")
        if n <= 0:
            raise DomainError(f"arm size must be positive, got size_{arm}={n}")
        if x < 0 or x > n:
            raise DomainError(
                f"events must lie in [0, size], got events_{arm}={x} with size_{arm}={n}"
            )


def apply_continuity_correction(table: TwoByTwoTable) -> CorrectedTable:
    """Add 0.5 to every cell of a table that has an empty cell.

    A cell is empty when either arm has zero events or zero non-events.
    The correction adds 0.5 to all four cells, which raises each arm
    size by 1.0.  Tables without empty cells pass through unchanged.
    """
    zero_cell = (
        table.events_trt == 0
        or table.events_ctl == 0
        or table.events_trt == table.size_trt
        or table.events_ctl == table.size_ctl
    )
    if not zero_cell:
        return CorrectedTable(
            float(table.events_trt),
            float(table.size_trt),
            float(table.events_ctl),
            float(table.size_ctl),
            corrected=False,
        )
    return CorrectedTable(
        table.events_trt + 0.5,
        table.size_trt + 1.0,
        table.events_ctl + 0.5,
        table.size_ctl + 1.0,
        corrected=True,
    )


def _check_open_cells(t: CorrectedTable) -> None:
    if (
        t.events_trt <= 0
        or t.events_ctl <= 0
        or t.events_trt >= t.size_trt
        or t.events_ctl >= t.size_ctl
    ):
        raise DomainError(
            "log effect undefined for boundary counts; apply the continuity correction first"
        )


def log_odds_ratio(t: CorrectedTable) -> StudyEstimate:
    """Log odds ratio with the standard four-cell variance."""
    _check_open_cells(t)
    a, b = t.events_trt, t.size_trt - t.events_trt
    c, d = t.events_ctl, t.size_ctl - t.events_ctl
    y = math.log((a / b) / (c / d))
    se = math.sqrt(1.0 / a + 1.0 / b + 1.0 / c + 1.0 / d)
    return StudyEstimate(y=y, se=se, measure=Measure.OR, corrected=t.corrected)


def log_risk_ratio(t: CorrectedTable) -> StudyEstimate:
    """Log risk ratio with the standard large-sample variance."""
    _check_open_cells(t)
    y = math.log((t.events_trt / t.size_trt) / (t.events_ctl / t.size_ctl))
    se = math.sqrt(
        1.0 / t.events_trt
        - 1.0 / t.size_trt
        + 1.0 / t.events_ctl
        - 1.0 / t.size_ctl
    )
    return StudyEstimate(y=y, se=se, measure=Measure.RR, corrected=t.corrected)


def study_estimates(
    tables: Iterable[TwoByTwoTable], measure: Measure
) -> list[StudyEstimate]:
    """Continuity-correct each table and compute the chosen log effect."""
    transform = log_odds_ratio if measure is Measure.OR else log_risk_ratio
    return [transform(apply_continuity_correction(t)) for t in tables]


def corrected_tables(tables: Iterable[TwoByTwoTable]) -> list[CorrectedTable]:
    """Continuity-correct every table that needs it."""
    return [apply_continuity_correction(t) for t in tables]
