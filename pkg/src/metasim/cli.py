"""Command-line client for the analysis and simulation service.

Commands call the service endpoint functions in-process by default;
pass --server to talk to a running instance over HTTP instead.
"""
from __future__ import annotations

import json
import sys
from contextlib import contextmanager

import click
from pydantic import ValidationError

from .datasets import (
    parse_dataset,
    write_analysis,
    write_simulation,
    write_tau_table,
)
from .errors import MetasimError
from .service.app import analyze_op, simulate_op, tau_table_op
from .service.schemas import (
    AnalyzeRequest,
    AnalyzeResponse,
    DatasetIn,
    RunConfig,
    SimulateResponse,
    StudyCounts,
    TauTableResponse,
)


def _http_post(server: str, path: str, payload: dict) -> dict:
    import httpx

    resp = httpx.post(f"{server.rstrip('/')}{path}", json=payload, timeout=None)
    if resp.status_code >= 400:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        raise click.ClickException(f"server rejected request: {detail}")
    return resp.json()


def _http_get(server: str, path: str, params: dict) -> dict:
    import httpx

    resp = httpx.get(f"{server.rstrip('/')}{path}", params=params, timeout=None)
    if resp.status_code >= 400:
        raise click.ClickException(f"server rejected request: {resp.text}")
    return resp.json()


@contextmanager
def _open_out(path: str):
    if path == "-":
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _wrap_errors(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except MetasimError as exc:
        raise click.ClickException(str(exc)) from exc
    except ValidationError as exc:
        raise click.ClickException(str(exc)) from exc


@click.group()
@click.option(
    "--server",
    default=None,
    metavar="URL",
    help="Base URL of a running service; omit to run in-process.",
)
@click.pass_context
def main(ctx: click.Context, server: str | None) -> None:
    """Meta-analysis methods for 2x2 count data, plus a coverage simulator."""
    ctx.obj = {"server": server}


@main.command()
@click.option(
    "--data",
    "data_path",
    required=True,
    type=click.Path(exists=True, dir_okay=False),
    help="CSV of study counts grouped by meta_id.",
)
@click.option(
    "--measure",
    required=True,
    type=click.Choice(["or", "rr"]),
    help="Effect measure: odds ratio or risk ratio.",
)
@click.option(
    "--methods",
    default=None,
    metavar="LIST",
    help="Comma-separated method ids; default: every applicable method.",
)
@click.option("--level", default=0.95, show_default=True, type=float)
@click.option(
    "--out",
    default="-",
    show_default=True,
    metavar="PATH",
    help="Output CSV path, or - for stdout.",
)
@click.pass_context
def analyze(
    ctx: click.Context,
    data_path: str,
    measure: str,
    methods: str | None,
    level: float,
    out: str,
) -> None:
    """Apply pooling methods to each dataset in a CSV file."""
    from .harness import MethodId, all_method_ids
    from .tables import Measure

    with open(data_path, newline="") as fh:
        datasets = _wrap_errors(parse_dataset, fh)
    measure = measure.upper()
    if methods is None:
        wanted = [m for m in all_method_ids() if m.supports(Measure(measure))]
        method_texts = [str(m) for m in wanted]
    else:
        method_texts = [t.strip() for t in methods.split(",") if t.strip()]
        for t in method_texts:
            _wrap_errors(MethodId.parse, t)
    req = _wrap_errors(
        AnalyzeRequest,
        datasets=[
            DatasetIn(
                meta_id=ds.id,
                studies=[
                    StudyCounts(
                        events_trt=t.events_trt,
                        n_trt=t.size_trt,
                        events_ctl=t.events_ctl,
                        n_ctl=t.size_ctl,
                    )
                    for t in ds.studies
                ],
            )
            for ds in datasets
        ],
        measure=measure,
        methods=method_texts,
        level=level,
    )
    server = ctx.obj["server"]
    if server is None:
        resp = _wrap_errors(analyze_op, req)
    else:
        data = _http_post(server, "/analyze", req.model_dump(mode="json"))
        resp = AnalyzeResponse.model_validate(data)
    with _open_out(out) as fh:
        write_analysis(fh, resp.rows)


@main.command()
@click.option(
    "--config",
    "config_path",
    required=True,
    type=click.Path(exists=True, dir_okay=False),
    help="JSON scenario-grid configuration.",
)
@click.option(
    "--out",
    default="-",
    show_default=True,
    metavar="PATH",
    help="Output CSV path, or - for stdout.",
)
@click.option("--workers", default=None, type=int, help="Override config workers.")
@click.option("--reps", default=None, type=int, help="Override config reps.")
@click.option("--seed", default=None, type=int, help="Override config seed.")
@click.pass_context
def simulate(
    ctx: click.Context,
    config_path: str,
    out: str,
    workers: int | None,
    reps: int | None,
    seed: int | None,
) -> None:
    """Run a coverage and interval-length simulation grid."""
    with open(config_path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise click.ClickException(f"invalid JSON config: {exc}") from exc
    cfg = _wrap_errors(RunConfig.model_validate, raw)
    overrides = {}
    if workers is not None:
        overrides["workers"] = workers
    if reps is not None:
        overrides["reps"] = reps
    if seed is not None:
        overrides["seed"] = seed
    if overrides:
        cfg = _wrap_errors(RunConfig.model_validate, {**cfg.model_dump(), **overrides})
    server = ctx.obj["server"]
    if server is None:
        resp = _wrap_errors(simulate_op, cfg)
    else:
        data = _http_post(server, "/simulate", cfg.model_dump(mode="json"))
        resp = SimulateResponse.model_validate(data)
    with _open_out(out) as fh:
        write_simulation(fh, resp.rows)


@main.command("tau-table")
@click.option("--n", default=100, show_default=True, type=int)
@click.option("--p0", default=0.7, show_default=True, type=float)
@click.option(
    "--out",
    default="-",
    show_default=True,
    metavar="PATH",
    help="Output CSV path, or - for stdout.",
)
@click.pass_context
def tau_table_cmd(ctx: click.Context, n: int, p0: float, out: str) -> None:
    """Tabulate the heterogeneity SD implied by relative-heterogeneity levels."""
    server = ctx.obj["server"]
    if server is None:
        resp = _wrap_errors(tau_table_op, n=n, p0=p0)
    else:
        data = _http_get(server, "/tau-table", {"n": n, "p0": p0})
        resp = TauTableResponse.model_validate(data)
    with _open_out(out) as fh:
        write_tau_table(fh, resp.rows)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve(host: str, port: int) -> None:
    """Start the HTTP service."""
    import uvicorn

    uvicorn.run("metasim.service.app:app", host=host, port=port)


if __name__ == "__main__":
    main()
