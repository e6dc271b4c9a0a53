"""Command line interface.

Subcommands: train, align, eval, analytic, run, plot-data.  Exit codes:
0 success, 1 configuration problem, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import shutil
import sys

from . import __version__
from .align import adabn
from .config import FIGURE_IDS, load_config
from .errors import BnalignError, ConfigError
from .model import save_model
from .report import (
    read_report_jsonl,
    write_analytic_csv,
    write_analytic_jsonl,
    write_label_shift_csv,
    write_metric_table_csv,
    write_report_csv,
)
from .runner import (
    FIGURE_PREFIX,
    eval_dataset,
    prepare_model,
    run_analytic_spec,
    run_cell,
    run_experiment,
)
from .shifts import apply_shifts


def _add_common(p):
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, default=None, help="override the config's global seed")
    p.add_argument("--out", default=None, help="output directory (defaults to the config's output_dir)")
    p.add_argument("--checkpoint", default=None, help="model checkpoint to load instead of training")


def build_parser():
    parser = argparse.ArgumentParser(prog="bnalign", description=__doc__)
    parser.add_argument("--version", action="version", version=f"bnalign {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint plus training log")
    _add_common(p)

    p = sub.add_parser("align", help="align a trained model's normalization statistics on one cell's target")
    _add_common(p)
    p.add_argument("--cell", required=True, help="id of the config cell whose shift/alignment to use")

    p = sub.add_parser("eval", help="evaluate a checkpoint on one cell's shifted data")
    _add_common(p)
    p.add_argument("--cell", required=True)

    p = sub.add_parser("analytic", help="run the closed-form experiments from the config")
    _add_common(p)

    p = sub.add_parser("run", help="full pipeline: train, run every cell, write reports and figures")
    _add_common(p)
    p.add_argument("--threads", type=int, default=None, help="worker threads for independent cells")
    p.add_argument("--no-figures", action="store_true", help="skip figure rendering")

    p = sub.add_parser("plot-data", help="extract tidy per-figure series from an existing report")
    p.add_argument("--report", required=True, help="report.jsonl produced by `run`")
    p.add_argument("--figure", required=True, choices=FIGURE_IDS)
    p.add_argument("--out", default=".", help="directory for the figure CSV and PNG")
    return parser


def _out_dir(args, config):
    out = args.out or config.output_dir
    os.makedirs(out, exist_ok=True)
    return out


def _find_cell(config, cell_id):
    for cell in config.cells:
        if cell.id == cell_id:
            return cell
    raise ConfigError(f"no cell with id {cell_id!r} in the config")


def _echo_config(args, out):
    dest = os.path.join(out, "run-config.json")
    if os.path.abspath(args.config) != os.path.abspath(dest):
        shutil.copyfile(args.config, dest)


def cmd_train(args):
    config = load_config(args.config, seed_override=args.seed)
    out = _out_dir(args, config)
    prepare_model(config, out_dir=out, checkpoint=None)
    print(f"checkpoint: {os.path.join(out, 'model.ckpt')}")
    print(f"train log:  {os.path.join(out, 'train-log.csv')}")
    return 0


def cmd_align(args):
    config = load_config(args.config, seed_override=args.seed)
    out = _out_dir(args, config)
    cell = _find_cell(config, args.cell)
    if cell.alignment is None:
        raise ConfigError(f"cell {cell.id!r} has no alignment plan")
    model, _ = prepare_model(config, out_dir=out, checkpoint=args.checkpoint)
    target = apply_shifts(eval_dataset(config), cell.shifts)
    aligned = adabn(model, target.images, cell.alignment)
    path = os.path.join(out, "model-aligned.ckpt")
    save_model(aligned, path)
    print(f"aligned checkpoint: {path}")
    return 0


def cmd_eval(args):
    config = load_config(args.config, seed_override=args.seed)
    out = _out_dir(args, config)
    cell = _find_cell(config, args.cell)
    model, _ = prepare_model(config, out_dir=out, checkpoint=args.checkpoint)
    rows = run_cell(model, eval_dataset(config), cell, config)
    for row in rows:
        print(f"{row.experiment} {row.metric}{f'[{row.metric_params}]' if row.metric_params else ''} = {row.value:.6f}")
    write_report_csv(rows, os.path.join(out, "eval-report.csv"))
    return 0


def cmd_analytic(args):
    config = load_config(args.config, seed_override=args.seed)
    out = _out_dir(args, config)
    rows = []
    for i, spec in enumerate(config.analytic):
        rows.extend(run_analytic_spec(spec, config.seed, i))
    if not rows:
        raise ConfigError("config lists no analytic experiments")
    write_analytic_csv(rows, os.path.join(out, "analytic.csv"))
    write_analytic_jsonl(rows, os.path.join(out, "analytic.jsonl"))
    for row in rows:
        mc = "" if row.mc_estimate is None else f"  (MC {row.mc_estimate:.6f} +- {row.mc_se:.2g})"
        print(f"{row.experiment} {row.quantity} = {row.closed_form:.8g}{mc}")
    return 0


def cmd_run(args):
    config = load_config(args.config, seed_override=args.seed)
    out = _out_dir(args, config)
    _echo_config(args, out)
    result = run_experiment(config, out_dir=out, threads=args.threads, checkpoint=args.checkpoint, render=not args.no_figures)
    for name, path in sorted(result.paths.items()):
        print(f"{name}: {path}")
    for cell_id, message in result.failures:
        print(f"cell {cell_id} failed: {message}", file=sys.stderr)
    return result.status


def cmd_plot_data(args):
    rows = read_report_jsonl(args.report)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, f"{args.figure}.csv")
    png_path = os.path.join(args.out, f"{args.figure}.png")
    from . import figures as figmod

    if args.figure == "fig2-label-shift":
        ks, series, points = write_label_shift_csv(rows, csv_path)
        figmod.render_label_shift_curve(ks, series, points, png_path)
    else:
        prefix, metric = FIGURE_PREFIX[args.figure]
        picked = write_metric_table_csv(rows, csv_path, prefix, metric)
        figmod.render_metric_bars(picked, png_path, args.figure, metric)
    print(f"{args.figure}: {csv_path}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "align": cmd_align,
    "eval": cmd_eval,
    "analytic": cmd_analytic,
    "run": cmd_run,
    "plot-data": cmd_plot_data,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except BnalignError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
