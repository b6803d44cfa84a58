"""Request and response models for the HTTP service."""
from __future__ import annotations

from pydantic import BaseModel, Field

from ..simgen import Design
from ..tables import Measure


class StudyCounts(BaseModel):
    events_trt: int = Field(ge=0)
    n_trt: int = Field(ge=1)
    events_ctl: int = Field(ge=0)
    n_ctl: int = Field(ge=1)


class DatasetIn(BaseModel):
    meta_id: str = Field(min_length=1)
    studies: list[StudyCounts] = Field(min_length=1)


class AnalyzeRequest(BaseModel):
    datasets: list[DatasetIn] = Field(min_length=1)
    measure: Measure
    methods: list[str] = Field(min_length=1)
    level: float = Field(default=0.95, gt=0.0, lt=1.0)


class AnalysisRowOut(BaseModel):
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


class AnalyzeResponse(BaseModel):
    rows: list[AnalysisRowOut]


class RunConfig(BaseModel):
    """Scenario grid: the cross product of the list-valued fields."""

    measures: list[Measure] = Field(min_length=1)
    designs: list[Design] = Field(min_length=1)
    n: list[int] = Field(min_length=1)
    k: list[int] = Field(min_length=1)
    p0: list[float] = Field(min_length=1)
    i_squared: list[float] = Field(min_length=1)
    methods: list[str] = Field(min_length=1)
    reps: int = Field(default=2000, ge=1)
    seed: int = 0
    level: float = Field(default=0.95, gt=0.0, lt=1.0)
    workers: int = Field(default=1, ge=1)


class ScenarioRowOut(BaseModel):
    measure: Measure
    design: Design
    n: int
    k: int
    p0: float
    i_squared: float
    tau: float
    seed: int
    method: str
    interval_kind: str
    coverage: float | None
    mean_length: float | None
    median_length: float | None
    nonconvergence_rate: float | None
    effective_reps: int


class SimulateResponse(BaseModel):
    rows: list[ScenarioRowOut]


class TauRowOut(BaseModel):
    k: int
    measure: Measure
    design: Design
    i_squared: float
    tau: float


class TauTableResponse(BaseModel):
    n: int
    p0: float
    rows: list[TauRowOut]


class ServiceInfo(BaseModel):
    name: str
    version: str
    methods: list[str]
