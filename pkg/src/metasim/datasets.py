"""CSV input and output for meta-analytic count data and results.

Input format: one row per study, grouped into datasets by meta_id.
Dataset order and study order both follow first appearance in the file.
"""
from __future__ import annotations

import csv
import io
from typing import Iterable, TextIO

from .errors import DomainError, ParseError
from .tables import MetaDataset, TwoByTwoTable

DATASET_HEADER = ("meta_id", "study_id", "events_trt", "n_trt", "events_ctl", "n_ctl")

ANALYZE_HEADER = (
    "meta_id",
    "k",
    "measure",
    "method",
    "interval_kind",
    "est_log",
    "est_ratio",
    "lower_log",
    "upper_log",
    "length_log",
    "tau",
    "converged",
    "ratio_vs_dl",
)

SIMULATE_HEADER = (
    "measure",
    "design",
    "n",
    "k",
    "p0",
    "i2",
    "tau",
    "method",
    "interval_kind",
    "coverage",
    "mean_length",
    "median_length",
    "nonconvergence_rate",
    "effective_reps",
    "seed",
)

TAU_TABLE_HEADER = ("k", "measure", "design", "i2", "tau")


def _num(value: float | None, fmt: str = "%.12g") -> str:
    if value is None or value != value:
        return ""
    return fmt % value


def parse_dataset_text(text: str) -> list[MetaDataset]:
    return parse_dataset(io.StringIO(text))


def parse_dataset(stream: TextIO) -> list[MetaDataset]:
    """Read count data grouped by meta_id; errors carry the line number."""
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty input") from None
    if tuple(h.strip() for h in header) != DATASET_HEADER:
        raise ParseError(
            f"expected header {','.join(DATASET_HEADER)}", line=1
        )

    groups: dict[str, list[TwoByTwoTable]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(DATASET_HEADER):
            raise ParseError(
                f"expected {len(DATASET_HEADER)} fields, got {len(row)}",
                line=lineno,
            )
        meta_id = row[0].strip()
        if not meta_id:
            raise ParseError("empty meta_id", line=lineno)
        try:
            cells = [int(v) for v in row[2:]]
        except ValueError:
            raise ParseError(
                "count fields must be integers", line=lineno
            ) from None
        try:
            table = TwoByTwoTable(*cells)
        except DomainError as exc:
            raise ParseError(str(exc), line=lineno) from exc
        groups.setdefault(meta_id, []).append(table)

    if not groups:
        raise ParseError("no study rows found")
    return [
        MetaDataset(id=meta_id, studies=tuple(tables))
        for meta_id, tables in groups.items()
    ]


def write_dataset(stream: TextIO, datasets: Iterable[MetaDataset]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(DATASET_HEADER)
    for ds in datasets:
        for i, t in enumerate(ds.studies, start=1):
            writer.writerow(
                [ds.id, i, t.events_trt, t.size_trt, t.events_ctl, t.size_ctl]
            )


def write_analysis(stream: TextIO, rows: Iterable) -> None:
    """Write analysis rows (harness dataclasses or service models) as CSV."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(ANALYZE_HEADER)
    for r in rows:
        writer.writerow(
            [
                r.meta_id,
                r.k,
                r.measure.value,
                r.method,
                r.interval_kind,
                _num(r.est_log),
                _num(r.est_ratio),
                _num(r.lower_log),
                _num(r.upper_log),
                _num(r.length_log),
                _num(r.tau),
                str(r.converged).lower(),
                _num(r.ratio_vs_dl),
            ]
        )


def write_simulation(stream: TextIO, rows: Iterable) -> None:
    """Write flat scenario rows (one per cell and method) as CSV."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(SIMULATE_HEADER)
    for r in rows:
        writer.writerow(
            [
                r.measure.value,
                r.design.value,
                r.n,
                r.k,
                _num(r.p0),
                _num(r.i_squared),
                _num(r.tau),
                r.method,
                r.interval_kind,
                _num(r.coverage, "%.6f"),
                _num(r.mean_length),
                _num(r.median_length),
                _num(r.nonconvergence_rate, "%.6f"),
                r.effective_reps,
                r.seed,
            ]
        )


def write_tau_table(stream: TextIO, rows) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(TAU_TABLE_HEADER)
    for r in rows:
        writer.writerow(
            [
                r.k,
                r.measure.value,
                r.design.value,
                _num(r.i_squared),
                _num(r.tau),
            ]
        )
