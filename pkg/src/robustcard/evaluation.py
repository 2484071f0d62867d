"""q-error reports in the simple/complex/per-template layout, and cross-algorithm comparison."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

QUANTILES = (50, 75, 95, 99)
FLAG_THRESHOLD = 0.20


def q_error(c, c_hat):
    """max(c / c_hat, c_hat / c) after clamping both to at least 1. Vectorised."""
    c = np.maximum(np.asarray(c, dtype=np.float64), 1.0)
    c_hat = np.maximum(np.asarray(c_hat, dtype=np.float64), 1.0)
    out = np.maximum(c / c_hat, c_hat / c)
    return float(out) if out.ndim == 0 else out


def nearest_rank(values: Sequence[float], pct: float) -> float:
    """The ceil(pct/100 * n)-th smallest value (1-based)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if len(v) == 0:
        raise ValueError("no values")
    rank = max(1, math.ceil(pct / 100.0 * len(v) - 1e-9))
    return float(v[rank - 1])


@dataclass
class QErrorReport:
    algorithm: str
    arch: str
    split: dict
    quantiles: dict[str, dict[str, float] | None]
    counts: dict[str, int]
    wall_time: float | None = None
    predictions: list[float] = field(default_factory=list)
    labels: list[int] = field(default_factory=list)
    groups: dict[str, list[str]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "algorithm": self.algorithm, "arch": self.arch, "split": self.split,
            "quantiles": self.quantiles, "counts": self.counts, "wall_time": self.wall_time,
            "predictions": self.predictions, "labels": self.labels, "groups": self.groups,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "QErrorReport":
        return cls(**obj)

    @property
    def name(self) -> str:
        return f"{self.algorithm}-{self.arch}"


def quantile_report(preds: Sequence[float], labels: Sequence[float],
                    grouping: Mapping[str, Sequence[str]] | None = None,
                    algorithm: str = "", arch: str = "", split: dict | None = None,
                    wall_time: float | None = None, group_order: Sequence[str] | None = None
                    ) -> QErrorReport:
    """Per-group nearest-rank q-error quantiles.

    ``grouping`` maps query index to group names as a list per query (e.g.
    ``["simple"]`` or ``["complex", "t3"]``); "overall" is always included.
    Groups named in ``group_order`` but with no queries are reported as
    ``None`` rather than zeros.
    """
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if len(preds) != len(labels):
        raise ValueError("predictions and labels differ in length")
    if len(preds) == 0:
        raise ValueError("empty prediction set")
    errs = q_error(labels, preds)
    errs = np.atleast_1d(errs)
    members: dict[str, list[int]] = {"overall": list(range(len(errs)))}
    names = list(group_order or [])
    for i, gs in (grouping or {}).items():
        for g in gs:
            members.setdefault(g, []).append(int(i))
            if g not in names:
                names.append(g)
    quantiles: dict[str, dict[str, float] | None] = {}
    counts: dict[str, int] = {}
    for g in ["overall", *[n for n in names if n != "overall"]]:
        idx = members.get(g, [])
        counts[g] = len(idx)
        quantiles[g] = ({str(p): nearest_rank(errs[idx], p) for p in QUANTILES} if idx else None)
    return QErrorReport(
        algorithm=algorithm, arch=arch, split=split or {}, quantiles=quantiles, counts=counts,
        wall_time=wall_time, predictions=[float(p) for p in preds], labels=[float(c) for c in labels],
        groups={str(k): list(v) for k, v in (grouping or {}).items()})


@dataclass
class Comparison:
    baseline: str
    groups: list[str]
    rows: list[dict]  # {"name", "cells": {group: {pct: value}}, "flags": {group: {pct: bool}}}

    @property
    def n_flags(self) -> int:
        return sum(f for r in self.rows for g in r["flags"].values() for f in g.values())

    def to_json(self) -> dict:
        return {"baseline": self.baseline, "groups": self.groups, "rows": self.rows}


def compare_algorithms(reports: Sequence[QErrorReport], baseline: str = "erm",
                       threshold: float = FLAG_THRESHOLD) -> Comparison:
    """Flag every cell at least ``threshold`` (relative) below the baseline's same cell."""
    base = [r for r in reports if r.algorithm == baseline]
    if not base:
        raise ValueError(f"no {baseline!r} baseline report among {[r.name for r in reports]}")
    base_r = base[0]
    splits = {json.dumps(r.split, sort_keys=True) for r in reports}
    if len(splits) > 1:
        raise ValueError("reports were produced on different splits")
    groups = [g for g in base_r.quantiles]
    rows = []
    for r in reports:
        cells, flags = {}, {}
        for g in groups:
            mine, ref = r.quantiles.get(g), base_r.quantiles.get(g)
            cells[g] = mine
            flags[g] = {}
            if mine is None or ref is None:
                continue
            for p in mine:
                flags[g][p] = (r is not base_r and mine[p] <= (1.0 - threshold) * ref[p] + 1e-12)
        rows.append({"name": r.name, "cells": cells, "flags": flags})
    return Comparison(base_r.name, groups, rows)


def format_table(comp: Comparison) -> str:
    """Aligned text table; flagged cells carry a trailing ``*``."""
    pcts = [str(p) for p in QUANTILES]
    header = ["algorithm"] + [f"{g}:{p}%" for g in comp.groups for p in pcts]
    lines = [header]
    for row in comp.rows:
        cells = [row["name"]]
        for g in comp.groups:
            for p in pcts:
                v = (row["cells"].get(g) or {}).get(p)
                if v is None:
                    cells.append("-")
                else:
                    cells.append(f"{v:.2f}" + ("*" if row["flags"].get(g, {}).get(p) else ""))
        lines.append(cells)
    widths = [max(len(l[i]) for l in lines) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(l, widths)))
                     for l in lines) + "\n"


def format_report(report: QErrorReport) -> str:
    lines = [f"# {report.name}  split={json.dumps(report.split, sort_keys=True)}"]
    if report.wall_time is not None:
        lines.append(f"# train wall time {report.wall_time:.1f}s")
    lines.append("group".ljust(12) + "n".rjust(7) + "".join(f"{p}%".rjust(11) for p in QUANTILES))
    for g, qs in report.quantiles.items():
        row = g.ljust(12) + str(report.counts[g]).rjust(7)
        row += "".join((f"{qs[str(p)]:.2f}" if qs else "absent").rjust(11) for p in QUANTILES)
        lines.append(row)
    return "\n".join(lines) + "\n"


def write_report(report: QErrorReport, directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    base = directory / report.name
    paths = [base.with_suffix(".json"), base.with_suffix(".txt"), base.with_suffix(".csv")]
    paths[0].write_text(json.dumps(report.to_json(), indent=1) + "\n")
    paths[1].write_text(format_report(report))
    errs = np.atleast_1d(q_error(report.labels, report.predictions))
    with paths[2].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "cardinality", "estimate", "q_error", "groups"])
        for i, (c, p, e) in enumerate(zip(report.labels, report.predictions, errs)):
            w.writerow([i, int(c), repr(float(p)), repr(float(e)), ";".join(report.groups.get(str(i), []))])
    return paths


def read_report(path: str | Path) -> QErrorReport:
    return QErrorReport.from_json(json.loads(Path(path).read_text()))
