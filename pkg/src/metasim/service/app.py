"""HTTP service wrapping the analysis and simulation engines.

The endpoint bodies live in plain functions (analyze_op, simulate_op,
tau_table_op, info_op) so the CLI can call them in-process without a
running server.
"""
from __future__ import annotations

import math
from itertools import product

from fastapi import FastAPI, Query, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..errors import DomainError, ParseError
from ..harness import MethodId, all_method_ids, analyze_dataset, run_scenario
from ..simgen import ScenarioSpec, tau_table
from ..tables import MetaDataset, TwoByTwoTable
from .schemas import (
    AnalysisRowOut,
    AnalyzeRequest,
    AnalyzeResponse,
    RunConfig,
    ScenarioRowOut,
    ServiceInfo,
    SimulateResponse,
    TauRowOut,
    TauTableResponse,
)


def _none_if_nan(value: float | None) -> float | None:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return None
    return value


def analyze_op(req: AnalyzeRequest) -> AnalyzeResponse:
    methods = [MethodId.parse(t) for t in req.methods]
    rows: list[AnalysisRowOut] = []
    for ds in req.datasets:
        dataset = MetaDataset(
            id=ds.meta_id,
            studies=tuple(
                TwoByTwoTable(s.events_trt, s.n_trt, s.events_ctl, s.n_ctl)
                for s in ds.studies
            ),
        )
        for row in analyze_dataset(dataset, req.measure, methods, req.level):
            rows.append(
                AnalysisRowOut(
                    meta_id=row.meta_id,
                    k=row.k,
                    measure=row.measure,
                    method=row.method,
                    interval_kind=row.interval_kind,
                    est_log=row.est_log,
                    est_ratio=row.est_ratio,
                    lower_log=row.lower_log,
                    upper_log=row.upper_log,
                    length_log=row.length_log,
                    tau=row.tau,
                    converged=row.converged,
                    ratio_vs_dl=row.ratio_vs_dl,
                    note=row.note,
                )
            )
    return AnalyzeResponse(rows=rows)


def simulate_op(cfg: RunConfig) -> SimulateResponse:
    """Run every cell of the scenario grid with a shared base seed.

    Methods that do not apply to a cell's effect measure are skipped
    for that cell; a cell with no applicable methods is an error.
    """
    methods = [MethodId.parse(t) for t in cfg.methods]
    rows: list[ScenarioRowOut] = []
    for measure, design, n, k, p0, i2 in product(
        cfg.measures, cfg.designs, cfg.n, cfg.k, cfg.p0, cfg.i_squared
    ):
        cell_methods = [m for m in methods if m.supports(measure)]
        if not cell_methods:
            raise DomainError(
                f"no requested method supports measure {measure.value}"
            )
        spec = ScenarioSpec(
            measure=measure,
            design=design,
            n_per_arm=n,
            k=k,
            p0=p0,
            i_squared=i2,
            level=cfg.level,
            reps=cfg.reps,
            seed=cfg.seed,
        )
        result = run_scenario(spec, cell_methods, workers=cfg.workers)
        for method_text, agg in result.methods.items():
            model, _, interval = method_text.partition("/")
            rows.append(
                ScenarioRowOut(
                    measure=measure,
                    design=design,
                    n=n,
                    k=k,
                    p0=p0,
                    i_squared=i2,
                    tau=result.tau,
                    seed=cfg.seed,
                    method=model,
                    interval_kind=interval or "HPD",
                    coverage=_none_if_nan(agg.coverage),
                    mean_length=_none_if_nan(agg.mean_length),
                    median_length=_none_if_nan(agg.median_length),
                    nonconvergence_rate=_none_if_nan(agg.nonconvergence_rate),
                    effective_reps=agg.effective_reps,
                )
            )
    return SimulateResponse(rows=rows)


def tau_table_op(n: int = 100, p0: float = 0.7) -> TauTableResponse:
    rows = [
        TauRowOut(
            k=r.k,
            measure=r.measure,
            design=r.design,
            i_squared=r.i_squared,
            tau=r.tau,
        )
        for r in tau_table(n=n, p0=p0)
    ]
    return TauTableResponse(n=n, p0=p0, rows=rows)


def info_op() -> ServiceInfo:
    return ServiceInfo(
        name="metasim",
        version=__version__,
        methods=[str(m) for m in all_method_ids()],
    )


def create_app() -> FastAPI:
    app = FastAPI(title="metasim", version=__version__)

    @app.exception_handler(DomainError)
    async def _domain_error(request: Request, exc: DomainError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(ParseError)
    async def _parse_error(request: Request, exc: ParseError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.post("/analyze", response_model=AnalyzeResponse)
    def analyze(req: AnalyzeRequest) -> AnalyzeResponse:
        return analyze_op(req)

    @app.post("/simulate", response_model=SimulateResponse)
    def simulate(cfg: RunConfig) -> SimulateResponse:
        return simulate_op(cfg)

    @app.get("/tau-table", response_model=TauTableResponse)
    def tau_table_route(
        n: int = Query(default=100, ge=1),
        p0: float = Query(default=0.7, gt=0.0, lt=1.0),
    ) -> TauTableResponse:
        return tau_table_op(n=n, p0=p0)

    @app.get("/", response_model=ServiceInfo)
    def info() -> ServiceInfo:
        return info_op()

    return app


app = create_app()
