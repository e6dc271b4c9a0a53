"""Report rows and their CSV / JSON-lines serializations.

Every row is self-describing: experiment id, shift, alignment, mask, metric
(with parameters such as the ECE bin count), value, seed, and tool version.
Floats are written with Python's shortest round-trip repr, so identical runs
produce byte-identical files.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

from . import __version__
from .errors import ConfigError

REPORT_COLUMNS = ("experiment", "shift", "alignment", "mask", "metric", "metric_params", "value", "seed", "version")
ANALYTIC_COLUMNS = ("experiment", "parameters", "quantity", "closed_form", "mc_estimate", "mc_se")


@dataclass(frozen=True)
class ReportRow:
    experiment: str
    shift: str
    alignment: str
    mask: str
    metric: str
    value: float
    seed: int
    metric_params: str = ""
    version: str = __version__
    error: str = ""  # populated only on failed cells

    def __post_init__(self):
        if self.metric != "error" and not math.isfinite(self.value):
            raise ConfigError(f"report value must be finite, got {self.value} for {self.metric}")


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_report_csv(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(REPORT_COLUMNS) + "\n")
        for row in rows:
            rec = asdict(row)
            fh.write(",".join(_fmt(rec[c]) for c in REPORT_COLUMNS) + "\n")


def write_report_jsonl(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(asdict(row), sort_keys=True) + "\n")


def read_report_jsonl(path):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(ReportRow(**json.loads(line)))
    return rows


@dataclass(frozen=True)
class AnalyticRow:
    experiment: str
    parameters: str  # JSON-encoded parameter dict
    quantity: str
    closed_form: float
    mc_estimate: float | None = None
    mc_se: float | None = None


def analytic_rows(result):
    """Flatten one AnalyticResult into one row per named quantity."""
    params = json.dumps(result.params, sort_keys=True)
    rows = []
    for name in sorted(result.values):
        est, se = result.mc.get(name, (None, None))
        rows.append(AnalyticRow(result.experiment, params, name, float(result.values[name]), est, se))
    return rows


def write_analytic_csv(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(ANALYTIC_COLUMNS) + "\n")
        for row in rows:
            rec = asdict(row)
            cells = []
            for c in ANALYTIC_COLUMNS:
                v = rec[c]
                if v is None:
                    cells.append("")
                elif c == "parameters":
                    cells.append('"' + v.replace('"', '""') + '"')
                else:
                    cells.append(_fmt(v))
            fh.write(",".join(cells) + "\n")


def write_analytic_jsonl(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(asdict(row), sort_keys=True) + "\n")


# -- tidy plot data -----------------------------------------------------------


class MissingSeriesError(ConfigError):
    """A requested figure needs report cells that are absent."""

    def __init__(self, figure, missing):
        self.figure = figure
        self.missing = sorted(missing)
        super().__init__(f"figure {figure!r}: missing cells {self.missing}")


def label_shift_series(rows, metric="accuracy"):
    """Tidy (classes_kept, series, value) triples for the label-shift curve.

    Expects rows whose experiment ids look like ``fig2/k{K}/{series}``; every
    series must cover every k or the extraction fails loudly.
    """
    points = {}
    for row in rows:
        if row.metric != metric or not row.experiment.startswith("fig2/"):
            continue
        _, kpart, series = row.experiment.split("/", 2)
        points[(int(kpart[1:]), series)] = row.value
    if not points:
        raise MissingSeriesError("fig2-label-shift", ["<no fig2/* rows at all>"])
    ks = sorted({k for k, _ in points})
    series = sorted({s for _, s in points})
    missing = [(k, s) for k in ks for s in series if (k, s) not in points]
    if missing:
        raise MissingSeriesError("fig2-label-shift", [f"k={k},series={s}" for k, s in missing])
    return ks, series, points


def write_label_shift_csv(rows, path, metric="accuracy"):
    ks, series, points = label_shift_series(rows, metric)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("classes_kept," + ",".join(series) + "\n")
        for k in ks:
            fh.write(str(k) + "," + ",".join(repr(points[(k, s)]) for s in series) + "\n")
    return ks, series, points


def write_metric_table_csv(rows, path, prefix, metric="accuracy"):
    """One row per (experiment suffix) cell under a common id prefix."""
    picked = [r for r in rows if r.metric == metric and r.experiment.startswith(prefix + "/")]
    if not picked:
        raise MissingSeriesError(prefix, [f"<no {prefix}/* rows with metric {metric}>"])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"cell,shift,alignment,mask,{metric}\n")
        for r in picked:
            cell = r.experiment.split("/", 1)[1]
            fh.write(f"{cell},{r.shift},{r.alignment},{r.mask},{r.value!r}\n")
    return picked
