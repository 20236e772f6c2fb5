"""Experiment records on disk (JSON lines) and their cost-table rendering.

Each line of a records file is one JSON object with exactly the fields of
:class:`~slucost.metrics.ExperimentRecord`. Metrics are stored as
percents and wall time as seconds.
"""

from __future__ import annotations

import json
from dataclasses import asdict, fields
from pathlib import Path

from .metrics import (
    DEFAULT_CO2_G_PER_KWH,
    ExperimentRecord,
    KwhPerPointKind,
    MetricError,
    compare_group,
    grams_co2,
    group_by_features,
    relative_cost_reduction,
    relative_performance_delta,
)

RECORD_FIELDS = tuple(f.name for f in fields(ExperimentRecord))
_REQUIRED = {"id", "strategy", "input_features", "param_count", "kwh", "grams_co2",
             "wall_time_s", "dev_metric", "test_metric", "metric_kind"}
COLUMNS = ("Train-stg", "params (M)", "input", "kWh (gCO2)", "kWh/p", "train-time", "DEV", "TEST")


class RecordsError(ValueError):
    pass


def record_to_json(record: ExperimentRecord) -> str:
    return json.dumps(asdict(record), sort_keys=True)


def record_from_dict(data: dict) -> ExperimentRecord:
    if not isinstance(data, dict):
        raise RecordsError("record is not a JSON object")
    unknown = set(data) - set(RECORD_FIELDS)
    missing = _REQUIRED - set(data)
    if unknown or missing:
        raise RecordsError(f"bad fields (missing {sorted(missing)}, unknown {sorted(unknown)})")
    try:
        return ExperimentRecord(**data)
    except (TypeError, MetricError) as exc:
        raise RecordsError(str(exc)) from exc


def read_records(path: str | Path) -> list[ExperimentRecord]:
    """Parse a records file; errors carry the 1-based line number."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise RecordsError(f"cannot read {path}: {exc.strerror}") from exc
    records, seen = [], set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = record_from_dict(json.loads(line))
        except (json.JSONDecodeError, RecordsError) as exc:
            raise RecordsError(f"{path}:{lineno}: {exc}") from exc
        if record.id in seen:
            raise RecordsError(f"{path}:{lineno}: duplicate record id {record.id!r}")
        seen.add(record.id)
        records.append(record)
    return records


def append_record(path: str | Path, record: ExperimentRecord) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as fh:
        fh.write(record_to_json(record) + "\n")


def format_duration(seconds: float) -> str:
    """``36h14'`` style, rounded to the nearest minute."""
    hours, minutes = divmod(int(round(seconds / 60.0)), 60)
    return f"{hours}h{minutes:02d}'"


def _small(value: float, decimals: int = 3) -> str:
    # desk-scale energies vanish at three decimals; fall back to scientific
    if value != 0 and abs(value) < 0.5 * 10 ** -decimals:
        return f"{value:.2e}"
    return f"{value:.{decimals}f}"


def _params(record: ExperimentRecord) -> str:
    text = _small(record.param_count / 1e6, 2)
    if record.external_param_count is not None:
        text += f" (+{_small(record.external_param_count / 1e6, 2)})"
    return text


def table_rows(records: list[ExperimentRecord], co2_g_per_kwh: float = DEFAULT_CO2_G_PER_KWH) -> list[list[str]]:
    """Rows grouped by input features (groups sorted by name), most expensive first."""
    rows = []
    groups = group_by_features(records)
    for feature in sorted(groups):
        group = groups[feature]
        kpp = compare_group(group)
        for r in sorted(group, key=lambda r: (-r.kwh, r.id)):
            value = kpp[r.id]
            shown = _small(value.value) if value.kind is KwhPerPointKind.FINITE else value.format()
            rows.append([
                r.strategy,
                _params(r),
                r.input_features,
                f"{_small(r.kwh)} ({grams_co2(r.kwh, co2_g_per_kwh)})",
                shown,
                format_duration(r.wall_time_s),
                f"{r.dev_metric:.2f}",
                f"{r.test_metric:.2f}",
            ])
    return rows


def render_table(records: list[ExperimentRecord], co2_g_per_kwh: float = DEFAULT_CO2_G_PER_KWH,
                 fmt: str = "text") -> str:
    rows = [list(COLUMNS)] + table_rows(records, co2_g_per_kwh)
    if fmt == "tsv":
        return "".join("\t".join(row) + "\n" for row in rows)
    if fmt != "text":
        raise RecordsError(f"unknown table format {fmt!r}")
    widths = [max(len(row[i]) for row in rows) for i in range(len(COLUMNS))]
    return "".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() + "\n" for row in rows)


def report_line(baseline: ExperimentRecord, challenger: ExperimentRecord) -> str:
    """Cost reduction and performance change of ``challenger`` relative to ``baseline``."""
    cost = round(relative_cost_reduction(baseline, challenger), 2) + 0.0
    perf = round(relative_performance_delta(baseline, challenger), 2) + 0.0
    cost_text = f"{cost:.2f}% cost reduction" if cost >= 0 else f"{-cost:.2f}% cost increase"
    if perf > 0:
        perf_text = f"{perf:.2f}% performance loss"
    elif perf < 0:
        perf_text = f"{-perf:.2f}% performance gain"
    else:
        perf_text = "0.00% performance change"
    return f"{cost_text}, {perf_text}"
