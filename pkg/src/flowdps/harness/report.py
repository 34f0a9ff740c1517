"""Aggregate ``metrics.csv`` files under a directory."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .experiments import METRICS_FILE
from .metrics import CSV_HEADER, MetricReport

__all__ = ["collect", "summarize", "report"]

SUMMARY_FILE = "summary.csv"
_METRICS = CSV_HEADER[3:]


def collect(root) -> MetricReport:
    """All rows from every ``metrics.csv`` below ``root``, in path order."""
    root = Path(root)
    files = sorted(root.rglob(METRICS_FILE))
    if not files:
        raise FileNotFoundError(f"no {METRICS_FILE} under {root}")
    rows = []
    for f in files:
        rows += MetricReport.read_csv(f).rows
    return MetricReport(rows)


def summarize(rep: MetricReport) -> list[dict]:
    """Per ``(solver, task)``: row count and the median of each finite metric."""
    groups = {}
    for r in rep.rows:
        groups.setdefault((r.solver, r.task), []).append(r)
    out = []
    for (solver, task), rows in sorted(groups.items()):
        entry = {"solver": solver, "task": task, "runs": len(rows)}
        for m in _METRICS:
            vals = np.array([getattr(r, m) for r in rows], dtype=float)
            vals = vals[np.isfinite(vals)]
            entry[m] = float(np.median(vals)) if vals.size else math.nan
        out.append(entry)
    return out


def report(root) -> str:
    """Write ``summary.csv`` in ``root`` and return a printable table."""
    summary = summarize(collect(root))
    cols = ["solver", "task", "runs", *_METRICS]
    with open(Path(root) / SUMMARY_FILE, "w", newline="") as fh:
        w = csv.DictWriter(fh, cols, lineterminator="\n")
        w.writeheader()
        w.writerows(summary)
    lines = ["  ".join(f"{c:>14}" for c in cols)]
    for e in summary:
        cells = [f"{e[c]:>14.4g}" if isinstance(e[c], float) else f"{e[c]!s:>14}" for c in cols]
        lines.append("  ".join(cells))
    return "\n".join(lines)
