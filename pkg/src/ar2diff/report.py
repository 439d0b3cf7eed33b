"""CSV and JSON report files for latency records and metric reports.

CSV columns are fixed:

* latency: ``kind,length,reps,median_ms,per_unit_ms,steps``
* metrics: ``task,model,metric,value,n,steps,samples,tau,seed``

Floats are written with ``repr`` so parsing a CSV back reproduces the
in-memory values exactly.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

from .bench import LatencyRecord
from .metrics import MetricReport

LATENCY_COLUMNS = ("kind", "length", "reps", "median_ms", "per_unit_ms", "steps")
METRIC_COLUMNS = ("task", "model", "metric", "value", "n", "steps", "samples", "tau", "seed")


def _metric_row(r: MetricReport) -> dict:
    s = r.settings
    return {"task": r.task, "model": r.model, "metric": r.metric, "value": repr(r.value),
            "n": r.n_examples, "steps": s.get("steps", ""), "samples": s.get("samples", ""),
            "tau": repr(s["tau"]) if "tau" in s else "", "seed": s.get("seed", "")}


def _latency_row(r: LatencyRecord) -> dict:
    return {"kind": r.kind, "length": r.length, "reps": r.reps, "median_ms": repr(r.median_ms),
            "per_unit_ms": repr(r.per_unit_ms), "steps": r.steps}


def write_report(
    out_dir: str | Path,
    name: str,
    latency: Sequence[LatencyRecord] = (),
    metrics: Sequence[MetricReport] = (),
    config_hash: str = "",
    seeds: dict | None = None,
) -> list[Path]:
    """Write ``{name}_latency.csv`` / ``{name}_metrics.csv`` and ``{name}_summary.json``."""
    if not latency and not metrics:
        raise ValueError("nothing to report: no latency records and no metrics")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for rows, columns, suffix, fmt in (
        (latency, LATENCY_COLUMNS, "latency", _latency_row),
        (metrics, METRIC_COLUMNS, "metrics", _metric_row),
    ):
        if not rows:
            continue
        path = out / f"{name}_{suffix}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns)
            writer.writeheader()
            for r in rows:
                writer.writerow(fmt(r))
        written.append(path)
    summary = {
        "config_hash": config_hash,
        "seeds": seeds or {},
        "records": [r.to_dict() for r in latency],
        "metrics": [r.to_dict() for r in metrics],
    }
    path = out / f"{name}_summary.json"
    path.write_text(json.dumps(summary, indent=1, sort_keys=True))
    written.append(path)
    return written


def _check_header(reader: csv.DictReader, expected: tuple[str, ...], path) -> None:
    if tuple(reader.fieldnames or ()) != expected:
        raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")


def read_latency_csv(path: str | Path) -> list[LatencyRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        _check_header(reader, LATENCY_COLUMNS, path)
        return [
            LatencyRecord(row["kind"], int(row["length"]), int(row["reps"]), float(row["median_ms"]),
                          float(row["per_unit_ms"]), int(row["steps"]))
            for row in reader
        ]


def read_metrics_csv(path: str | Path) -> list[tuple]:
    """Rows as tuples ordered like ``METRIC_COLUMNS`` with numeric fields parsed."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        _check_header(reader, METRIC_COLUMNS, path)
        for row in reader:
            out.append((row["task"], row["model"], row["metric"], float(row["value"]), int(row["n"]),
                        int(row["steps"]) if row["steps"] else None,
                        int(row["samples"]) if row["samples"] else None,
                        float(row["tau"]) if row["tau"] else None,
                        int(row["seed"]) if row["seed"] else None))
    return out


def metric_row_tuple(r: MetricReport) -> tuple:
    """The tuple :func:`read_metrics_csv` yields for ``r``."""
    s = r.settings
    return (r.task, r.model, r.metric, r.value, r.n_examples, s.get("steps"), s.get("samples"),
            s.get("tau"), s.get("seed"))
