"""Run records and their human- and machine-readable renderings.

A run collapses to one JSON-able record; every table and CSV is derived
from that record alone, so `report` can re-emit anything from disk and
identical runs produce byte-identical files. Tables print at 4 decimal
places; the record itself keeps full precision.
"""

from __future__ import annotations

import json
import os

from .harness import AccuracyMatrix, RunResult, compute_bwt, compute_op


def result_record(result: RunResult, config) -> dict:
    matrix = result.matrix
    try:
        op = compute_op(matrix)
    except ValueError:
        op = None
    bwt = None
    if matrix.num_phases >= 2:
        try:
            bwt = compute_bwt(matrix)
        except ValueError:
            pass  # resumed runs lack early diagonal cells
    return {
        "order": list(result.order),
        "generalist_id": result.generalist_id,
        "matrix": {"num_phases": matrix.num_phases, "cells": matrix.to_cells()},
        "routing": {
            "records": [
                {
                    "phase": r["phase"],
                    "per_task": {str(t): v for t, v in sorted(r["per_task"].items())},
                    "average": r["average"],
                }
                for r in result.trace.records
            ]
        },
        "metrics": {"op": op, "bwt": bwt},
        "config": config.to_dict(),
    }


def record_to_json(record: dict) -> str:
    return json.dumps(record, sort_keys=True, indent=2) + "\n"


def load_record(path) -> dict:
    if os.path.isdir(path):
        path = os.path.join(path, "run_record.json")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _matrix_from_record(record: dict) -> AccuracyMatrix:
    m = record["matrix"]
    return AccuracyMatrix.from_cells(m["num_phases"], m["cells"])


def _fmt(value) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def format_matrix_table(record: dict) -> str:
    matrix = _matrix_from_record(record)
    order = record["order"]
    k = matrix.num_phases
    label_w = max(len(f"task {t}") for t in order) + 2
    cell_w = 8
    lines = ["accuracy by phase (rows: task at phase i; cols: after phase t)"]
    header = " " * label_w + "".join(f"{f'p{t}':>{cell_w}}" for t in range(k))
    lines.append(header)
    for i in range(k):
        cells = "".join(
            f"{matrix.get(i, t):>{cell_w}.4f}" if matrix.has(i, t) else f"{'.':>{cell_w}}"
            for t in range(k)
        )
        lines.append(f"{f'task {order[i]}':<{label_w}}" + cells)
    metrics = record["metrics"]
    lines.append("")
    lines.append(f"overall performance (final column mean): {_fmt(metrics['op'])}")
    lines.append(f"backward transfer:                       {_fmt(metrics['bwt'])}")
    return "\n".join(lines) + "\n"


def format_trace_table(record: dict) -> str:
    records = record["routing"]["records"]
    if not records:
        return "routing accuracy: no phases recorded\n"
    lines = ["routing accuracy by phase (eval split of each seen task)"]
    for r in records:
        per = ", ".join(
            f"task {t}: {v:.4f}"
            for t, v in sorted(r["per_task"].items(), key=lambda kv: int(kv[0]))
        )
        lines.append(f"after phase {r['phase']}: avg {r['average']:.4f}  [{per}]")
    return "\n".join(lines) + "\n"


def matrix_csv(record: dict) -> str:
    matrix = _matrix_from_record(record)
    order = record["order"]
    k = matrix.num_phases
    rows = ["task_id," + ",".join(f"after_phase_{t}" for t in range(k))]
    for i in range(k):
        cells = [
            repr(matrix.get(i, t)) if matrix.has(i, t) else "" for t in range(k)
        ]
        rows.append(f"{order[i]}," + ",".join(cells))
    return "\n".join(rows) + "\n"


def trace_csv(record: dict) -> str:
    rows = ["phase,task_id,routing_accuracy"]
    for r in record["routing"]["records"]:
        for t, v in sorted(r["per_task"].items(), key=lambda kv: int(kv[0])):
            rows.append(f"{r['phase']},{t},{v!r}")
        rows.append(f"{r['phase']},average,{r['average']!r}")
    return "\n".join(rows) + "\n"


def full_report(record: dict) -> str:
    return format_matrix_table(record) + "\n" + format_trace_table(record)


def write_run_outputs(record: dict, out_dir) -> dict:
    """Emit the record plus all derived forms into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    outputs = {
        "run_record.json": record_to_json(record),
        "report.txt": full_report(record),
        "accuracy_matrix.csv": matrix_csv(record),
        "routing_trace.csv": trace_csv(record),
    }
    paths = {}
    for name, text in outputs.items():
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
        paths[name] = path
    return paths


def format_sweep_table(results: dict, split_layers, expansions) -> str:
    """Grid of op (bwt) over (split layer, expansion width)."""
    cell_w = 18
    lines = ["overall performance (backward transfer) by split layer x expansion"]
    header = f"{'split':<8}" + "".join(f"{f'E={e}':>{cell_w}}" for e in expansions)
    lines.append(header)
    for split in split_layers:
        cells = []
        for e in expansions:
            op, bwt = results[(split, e)]
            text = f"{op:.4f}" if bwt is None else f"{op:.4f} ({bwt:+.4f})"
            cells.append(f"{text:>{cell_w}}")
        lines.append(f"{split:<8}" + "".join(cells))
    return "\n".join(lines) + "\n"
