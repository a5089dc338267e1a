"""Curve emission: merge metric files into one aligned table and render it.

Convergence plots follow the ``test_*`` metrics of finetuning runs over epochs;
sweep plots follow every metric of a sweep file over the pretraining epoch.
Runs are aligned on the union of their epochs; a run without a record at some
epoch gets an empty cell (a gap in the curve), never an interpolated value.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ..errors import ConfigurationError  # noqa: E402
from .experiments import read_metrics  # noqa: E402

KINDS = ("convergence", "sweep")


class SchemaError(ConfigurationError):
    """Metric files disagree on the plotted columns."""


def _columns(records, kind: str, path) -> list[str]:
    keys = sorted({k for r in records for k in r.metrics})
    if kind == "convergence":
        keys = [k for k in keys if k.startswith("test_")]
    if not keys:
        raise SchemaError(f"{path} has no metrics to plot for a {kind} plot")
    return keys


def merge_curves(paths, kind: str = "convergence", labels=None):
    """Aligned curve data: ``(header, rows)`` with epoch first, then run:metric columns."""
    if kind not in KINDS:
        raise ConfigurationError(f"plot kind must be one of {KINDS}, got {kind!r}")
    paths = [Path(p) for p in paths]
    if not paths:
        raise ConfigurationError("plot needs at least one metrics file")
    labels = list(labels) if labels is not None else [p.parent.name or p.stem for p in paths]
    if len(set(labels)) != len(labels):
        labels = [f"{i}_{lab}" for i, lab in enumerate(labels)]
    runs, schema = [], None
    for path in paths:
        records = read_metrics(path)
        cols = _columns(records, kind, path)
        if schema is None:
            schema = cols
        elif cols != schema:
            raise SchemaError(f"{path} has columns {cols}, expected {schema}")
        by_epoch = {}
        for r in records:
            if r.epoch in by_epoch:
                raise SchemaError(f"{path} repeats epoch {r.epoch}")
            by_epoch[r.epoch] = r.metrics
        runs.append(by_epoch)
    epochs = sorted(set().union(*runs))
    header = ["epoch"] + [f"{lab}:{c}" for lab in labels for c in schema]
    rows = []
    for e in epochs:
        row = [e]
        for run in runs:
            m = run.get(e)
            row += [m.get(c) if m is not None else None for c in schema]
        rows.append(row)
    return header, rows


def write_curves(header, rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([row[0]] + ["" if v is None else repr(float(v)) for v in row[1:]])
    return path


def read_curves(path):
    with Path(path).open(newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [[int(r[0])] + [None if v == "" else float(v) for v in r[1:]] for r in reader]
    return header, rows


def render(header, rows, path, kind: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [r[0] for r in rows]
    for j, name in enumerate(header[1:], 1):
        ys = [math.nan if r[j] is None else r[j] for r in rows]
        ax.plot(xs, ys, marker="o", label=name)
    ax.set_xlabel("finetuning epoch" if kind == "convergence" else "target-pretraining epoch")
    ax.set_ylabel("metric")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def cmd_plot(paths, kind: str, out, labels=None) -> tuple[Path, Path]:
    """Write ``<kind>.csv`` and ``<kind>.png`` under ``out``."""
    header, rows = merge_curves(paths, kind, labels)
    out = Path(out)
    return write_curves(header, rows, out / f"{kind}.csv"), render(header, rows, out / f"{kind}.png", kind)
