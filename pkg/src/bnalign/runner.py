"""End-to-end experiment execution: train, shift, align, evaluate, report.

Cells are independent and may run on a thread pool; each one derives its own
PRNG streams from the global seed and the cell id, and rows are assembled in
config order, so reports are byte-identical for any worker count.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .align import adabn
from .analytic import (
    label_shift_experiment,
    mixture_shift_experiment,
    spatial_shift_experiment,
    theorem1_random_trials,
)
from .config import ExperimentConfig, _stable_seed
from .data import generate_shapes_dataset
from .errors import BnalignError, ConfigError
from .metrics import accuracy, ece, per_class_accuracy
from .model import build_small_cnn, load_model, save_model
from .report import (
    AnalyticRow,
    ReportRow,
    analytic_rows,
    write_analytic_csv,
    write_analytic_jsonl,
    write_label_shift_csv,
    write_metric_table_csv,
    write_report_csv,
    write_report_jsonl,
)
from .shifts import apply_shifts
from .train import evaluate, train, write_train_log_csv

FIGURE_PREFIX = {
    "table3-black-border": ("table3", "accuracy"),
    "table1-corruption": ("table1", "accuracy"),
    "table2-clean-alignment": ("table2", "accuracy"),
    "a1-ece": ("table1", "ece"),
}


@dataclass
class RunResult:
    status: int  # 0 ok, 2 when any cell failed
    rows: list
    analytic: list
    paths: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)


def prepare_model(config: ExperimentConfig, out_dir=None, checkpoint=None):
    """Load the checkpoint if given, else build and train on fresh data."""
    ckpt = checkpoint or config.checkpoint
    if ckpt:
        if not os.path.exists(ckpt):
            raise ConfigError(f"checkpoint path does not exist: {ckpt}")
        return load_model(ckpt), None
    ds = config.dataset
    train_set = generate_shapes_dataset(ds.n_per_class, ds.classes, ds.image_size, ds.seed)
    val_set = generate_shapes_dataset(max(ds.eval_n_per_class // 2, 1), ds.classes, ds.image_size, _stable_seed(config.seed, "val-data"))
    model = build_small_cnn(
        classes=ds.classes,
        image_size=ds.image_size,
        channels=config.model.channels,
        norm=config.model.norm,
        bn_eps=config.model.bn_eps,
        bn_momentum=config.model.bn_momentum,
        dropout=config.train.dropout,
        conv_bias=config.model.conv_bias,
        seed=config.seed,
    )
    log = train(model, train_set, config.train, val=val_set)
    if out_dir:
        write_train_log_csv(log, os.path.join(out_dir, "train-log.csv"))
        save_model(model, os.path.join(out_dir, "model.ckpt"))
    return model, log


def eval_dataset(config: ExperimentConfig):
    ds = config.dataset
    return generate_shapes_dataset(ds.eval_n_per_class, ds.classes, ds.image_size, ds.eval_seed)


def run_cell(model, eval_set, cell, config: ExperimentConfig):
    """Shift the eval set, align on its unlabeled images, evaluate, emit rows."""
    target = apply_shifts(eval_set, cell.shifts)
    shift_desc = "+".join(s.describe() for s in cell.shifts) or "none"
    if cell.alignment is not None:
        work = adabn(model, target.images, cell.alignment)
        align_desc = cell.alignment.describe()
        mask_desc = "all" if cell.alignment.mask_rule == "all" else f"{cell.alignment.mask_rule.replace('-k', '')}-{cell.alignment.mask_k}"
    else:
        work = model
        align_desc = "none"
        mask_desc = "none"
    records = evaluate(work, target)
    rows = []

    def add(metric, value, params=""):
        rows.append(
            ReportRow(
                experiment=cell.id,
                shift=shift_desc,
                alignment=align_desc,
                mask=mask_desc,
                metric=metric,
                metric_params=params,
                value=float(value),
                seed=config.seed,
            )
        )

    for metric in config.metrics:
        if metric == "accuracy":
            add("accuracy", accuracy(records))
        elif metric == "ece":
            add("ece", ece(records, config.ece_bins), params=f"bins={config.ece_bins}")
        elif metric == "per-class-accuracy":
            for cls, acc in per_class_accuracy(records).items():
                add("per-class-accuracy", acc, params=f"class={cls}")
    return rows


def _family_averages(all_rows, cells, seed):
    """Per-severity cells that share a family also report averaged rows."""
    groups = {}
    order = []
    for cell, rows in zip(cells, all_rows):
        if not cell.family or rows is None:
            continue
        for row in rows:
            key = (cell.family, row.alignment, row.mask, row.metric, row.metric_params)
            if key not in groups:
                groups[key] = []
                order.append(key)
            groups[key].append(row.value)
    out = []
    for key in order:
        family, alignment, mask, metric, params = key
        vals = groups[key]
        out.append(
            ReportRow(
                experiment=f"{family}@avg",
                shift="avg",
                alignment=alignment,
                mask=mask,
                metric=metric,
                metric_params=params,
                value=sum(vals) / len(vals),
                seed=seed,
            )
        )
    return out


def run_analytic_spec(spec: dict, global_seed: int, index: int):
    kind = spec["kind"]
    seed = int(spec.get("seed", _stable_seed(global_seed, "analytic", index)))
    mc = spec.get("mc_samples", 1_000_000)
    if kind == "label-shift":
        result = label_shift_experiment(
            p_minus=float(spec.get("p_minus", 0.875)),
            alignment=spec.get("alignment", "mean+var"),
            mc_samples=mc,
            seed=seed,
        )
        return analytic_rows(result)
    if kind == "spatial-shift":
        result = spatial_shift_experiment(
            convention=spec.get("convention", "pooled"), mc_samples=mc, seed=seed
        )
        return analytic_rows(result)
    if kind == "mixture-shift":
        result = mixture_shift_experiment(
            source_weights=tuple(spec.get("source_weights", (0.5, 0.5))),
            target_weights=tuple(spec.get("target_weights", (0.75, 0.25))),
            alignment=spec.get("alignment", "mean+var"),
            mc_samples=mc,
            seed=seed,
        )
        return analytic_rows(result)
    if kind == "theorem1":
        report = theorem1_random_trials(
            n_trials=int(spec.get("trials", 200)),
            samples_per_trial=int(spec.get("samples", 500)),
            seed=seed,
            moments=spec.get("moments", "population"),
        )
        params = json.dumps({k: v for k, v in spec.items() if k != "kind"}, sort_keys=True)
        return [
            AnalyticRow("theorem1", params, "checked", float(report.checked)),
            AnalyticRow("theorem1", params, "excluded", float(report.excluded)),
            AnalyticRow("theorem1", params, "violations", float(report.violations)),
            AnalyticRow("theorem1", params, "max_ratio", report.max_ratio),
        ]
    raise ConfigError(f"unknown analytic kind {kind!r}")


def write_figures(config, rows, analytic, out_dir):
    from . import figures as figmod

    paths = {}
    for fid in config.figures:
        csv_path = os.path.join(out_dir, f"{fid}.csv")
        png_path = os.path.join(out_dir, f"{fid}.png")
        if fid == "fig2-label-shift":
            ks, series, points = write_label_shift_csv(rows, csv_path)
            figmod.render_label_shift_curve(ks, series, points, png_path)
        else:
            prefix, metric = FIGURE_PREFIX[fid]
            picked = write_metric_table_csv(rows, csv_path, prefix, metric)
            figmod.render_metric_bars(picked, png_path, fid, metric)
        paths[fid] = csv_path
    if analytic:
        png = os.path.join(out_dir, "analytic.png")
        figmod.render_analytic_rows(analytic, png)
        paths["analytic-figure"] = png
    return paths


def run_experiment(config: ExperimentConfig, out_dir=None, threads=None, checkpoint=None, render=True) -> RunResult:
    out_dir = out_dir or config.output_dir
    os.makedirs(out_dir, exist_ok=True)
    threads = threads or config.threads

    model, _ = prepare_model(config, out_dir=out_dir, checkpoint=checkpoint)
    eval_set = eval_dataset(config) if config.cells else None

    per_cell = [None] * len(config.cells)
    failures = []

    def work(i):
        return run_cell(model, eval_set, config.cells[i], config)

    if threads > 1 and len(config.cells) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {pool.submit(work, i): i for i in range(len(config.cells))}
            for fut, i in futures.items():
                try:
                    per_cell[i] = fut.result()
                except BnalignError as exc:
                    failures.append((config.cells[i].id, str(exc)))
    else:
        for i in range(len(config.cells)):
            try:
                per_cell[i] = work(i)
            except BnalignError as exc:
                failures.append((config.cells[i].id, str(exc)))

    rows = []
    failed_ids = {cid for cid, _ in failures}
    for cell, cell_rows in zip(config.cells, per_cell):
        if cell_rows is not None:
            rows.extend(cell_rows)
        elif cell.id in failed_ids:
            message = next(msg for cid, msg in failures if cid == cell.id)
            rows.append(
                ReportRow(
                    experiment=cell.id,
                    shift="+".join(s.describe() for s in cell.shifts) or "none",
                    alignment=cell.alignment.describe() if cell.alignment else "none",
                    mask="none",
                    metric="error",
                    metric_params="",
                    value=1.0,
                    seed=config.seed,
                    error=message,
                )
            )
    rows.extend(_family_averages(per_cell, config.cells, config.seed))

    analytic = []
    for i, spec in enumerate(config.analytic):
        analytic.extend(run_analytic_spec(spec, config.seed, i))

    paths = {}
    if config.cells:
        paths["report_csv"] = os.path.join(out_dir, "report.csv")
        paths["report_jsonl"] = os.path.join(out_dir, "report.jsonl")
        write_report_csv(rows, paths["report_csv"])
        write_report_jsonl(rows, paths["report_jsonl"])
    if analytic:
        paths["analytic_csv"] = os.path.join(out_dir, "analytic.csv")
        paths["analytic_jsonl"] = os.path.join(out_dir, "analytic.jsonl")
        write_analytic_csv(analytic, paths["analytic_csv"])
        write_analytic_jsonl(analytic, paths["analytic_jsonl"])
    if render and config.figures:
        paths.update(write_figures(config, rows, analytic, out_dir))

    return RunResult(status=2 if failures else 0, rows=rows, analytic=analytic, paths=paths, failures=failures)
