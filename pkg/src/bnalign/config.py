"""Declarative experiment configuration (one JSON file per experiment grid).

A full example lives in configs/paper-figures.json; the quickstart config is
the minimal useful subset.  Validation collects every problem it finds and
reports them together, naming the offending fields.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

from .align import AlignmentPlan
from .errors import ConfigError
from .shifts import AugmentationPolicy, shift_from_dict
from .train import TrainConfig

KNOWN_METRICS = ("accuracy", "per-class-accuracy", "ece")
KNOWN_ANALYTIC = ("label-shift", "spatial-shift", "mixture-shift", "theorem1")
FIGURE_IDS = (
    "fig2-label-shift",
    "table3-black-border",
    "table1-corruption",
    "table2-clean-alignment",
    "a1-ece",
)


@dataclass
class DatasetSpec:
    classes: int = 4
    n_per_class: int = 300
    image_size: int = 24
    seed: int = 0
    eval_n_per_class: int = 200
    eval_seed: int = 1


@dataclass
class ModelSpec:
    channels: tuple = (8, 8, 16, 16, 32, 32)
    norm: str = "batch"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    conv_bias: bool = False


@dataclass
class Cell:
    id: str
    shifts: list
    alignment: AlignmentPlan | None
    family: str = ""


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: str = "runs/out"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    checkpoint: str | None = None
    cells: list = field(default_factory=list)
    metrics: tuple = ("accuracy", "ece")
    ece_bins: int = 15
    analytic: list = field(default_factory=list)
    figures: tuple = ()
    threads: int = 1


def _stable_seed(*parts) -> int:
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:6], "big")


def _take(d: dict, key, default, errors, path, cast=None, required=False):
    if key not in d:
        if required:
            errors.append(f"{path}.{key}: required field missing")
        return default
    value = d[key]
    if cast is not None:
        try:
            return cast(value)
        except (TypeError, ValueError):
            errors.append(f"{path}.{key}: cannot interpret {value!r}")
            return default
    return value


def _parse_augment(d, errors, path):
    if d is None:
        return AugmentationPolicy(enabled=False)
    try:
        pol = AugmentationPolicy(
            pad=int(d.get("pad", 2)),
            flip_prob=float(d.get("flip_prob", 0.5)),
            enabled=bool(d.get("enabled", True)),
        )
        return pol.validate()
    except (ConfigError, TypeError, ValueError) as exc:
        errors.append(f"{path}: {exc}")
        return AugmentationPolicy(enabled=False)


def _parse_alignment(d, errors, path, global_seed, cell_id, train_augment):
    if d is None:
        return None
    try:
        plan = AlignmentPlan(
            mode=d.get("mode", "adabn"),
            mask_rule=d.get("mask_rule", "all"),
            mask_k=int(d.get("mask_k", 0)),
            mask_indices=tuple(d["mask_indices"]) if "mask_indices" in d else None,
            estimator=d.get("estimator", "exact"),
            ema_momentum=float(d.get("ema_momentum", 0.1)),
            strategy=d.get("strategy", "sequential"),
            augment=_parse_augment(d["augment"], errors, f"{path}.augment") if "augment" in d else None,
            seed=int(d["seed"]) if "seed" in d else _stable_seed(global_seed, cell_id, "align"),
            batch_size=int(d.get("batch_size", 256)),
        )
        if plan.mode == "adabn-aug" and plan.augment is None:
            plan = replace(plan, augment=train_augment)  # default to the training policy
        return plan.validate()
    except (ConfigError, TypeError, ValueError) as exc:
        errors.append(f"{path}: {exc}")
        return None


def _parse_cell(d, errors, path, global_seed, train_augment):
    cell_id = _take(d, "id", None, errors, path, cast=str, required=True)
    if cell_id is None:
        return None
    raw_shifts = d.get("shifts", [d["shift"]] if "shift" in d else [{"kind": "none"}])
    shifts = []
    for i, sd in enumerate(raw_shifts):
        sd = dict(sd)
        sd.setdefault("seed", _stable_seed(global_seed, cell_id, "shift", i))
        try:
            shifts.append(shift_from_dict(sd))
        except ConfigError as exc:
            errors.append(f"{path}.shifts[{i}]: {exc}")
    alignment = _parse_alignment(d.get("alignment"), errors, f"{path}.alignment", global_seed, cell_id, train_augment)
    return Cell(id=cell_id, shifts=shifts, alignment=alignment, family=d.get("family", ""))


def parse_config(raw: dict) -> ExperimentConfig:
    errors: list = []
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    seed = _take(raw, "seed", None, errors, "config", cast=int, required=True)
    if seed is None:
        raise ConfigError("config.seed: required field missing (the global seed is mandatory)")

    d = raw.get("dataset", {})
    dataset = DatasetSpec(
        classes=_take(d, "classes", 4, errors, "dataset", int),
        n_per_class=_take(d, "n_per_class", 400, errors, "dataset", int),
        image_size=_take(d, "image_size", 16, errors, "dataset", int),
        seed=_take(d, "seed", _stable_seed(seed, "train-data"), errors, "dataset", int),
        eval_n_per_class=_take(d, "eval_n_per_class", 200, errors, "dataset", int),
        eval_seed=_take(d, "eval_seed", _stable_seed(seed, "eval-data"), errors, "dataset", int),
    )
    if dataset.classes < 2:
        errors.append("dataset.classes: need at least 2 classes")
    if dataset.image_size < 12:
        errors.append("dataset.image_size: must be >= 12")

    m = raw.get("model", {})
    model = ModelSpec(
        channels=tuple(_take(m, "channels", (8, 8, 16, 16, 32, 32), errors, "model", tuple)),
        norm=_take(m, "norm", "batch", errors, "model", str),
        bn_eps=_take(m, "bn_eps", 1e-5, errors, "model", float),
        bn_momentum=_take(m, "bn_momentum", 0.1, errors, "model", float),
        conv_bias=bool(m.get("conv_bias", False)),
    )
    if len(model.channels) != 6:
        errors.append("model.channels: exactly six conv block widths expected")

    t = raw.get("train", {})
    train_augment = _parse_augment(t.get("augment", {}), errors, "train.augment")
    train = TrainConfig(
        epochs=_take(t, "epochs", 20, errors, "train", int),
        batch_size=_take(t, "batch_size", 64, errors, "train", int),
        lr=_take(t, "lr", 0.05, errors, "train", float),
        momentum=_take(t, "momentum", 0.9, errors, "train", float),
        weight_decay=_take(t, "weight_decay", 5e-4, errors, "train", float),
        dropout=_take(t, "dropout", 0.1, errors, "train", float),
        augment=train_augment,
        seed=_take(t, "seed", _stable_seed(seed, "train"), errors, "train", int),
        lr_decay_epochs=tuple(_take(t, "lr_decay_epochs", (15,), errors, "train", tuple)),
        lr_decay_factor=_take(t, "lr_decay_factor", 0.1, errors, "train", float),
    )
    try:
        train.validate()
    except ConfigError as exc:
        errors.append(f"train: {exc}")

    cells = []
    seen_ids = set()
    for i, cd in enumerate(raw.get("cells", [])):
        cell = _parse_cell(cd, errors, f"cells[{i}]", seed, train_augment)
        if cell is None:
            continue
        if cell.id in seen_ids:
            errors.append(f"cells[{i}].id: duplicate id {cell.id!r}")
        seen_ids.add(cell.id)
        cells.append(cell)

    metrics = tuple(raw.get("metrics", ("accuracy", "ece")))
    for name in metrics:
        if name not in KNOWN_METRICS:
            errors.append(f"metrics: unknown metric {name!r} (known: {KNOWN_METRICS})")

    analytic = []
    for i, ad in enumerate(raw.get("analytic", [])):
        kind = ad.get("kind")
        if kind not in KNOWN_ANALYTIC:
            errors.append(f"analytic[{i}].kind: unknown kind {kind!r} (known: {KNOWN_ANALYTIC})")
            continue
        analytic.append(dict(ad))

    figures = raw.get("figures", ())
    if figures is True:
        figures = FIGURE_IDS
    elif figures in (False, None):
        figures = ()
    figures = tuple(figures)
    for fid in figures:
        if fid not in FIGURE_IDS:
            errors.append(f"figures: unknown figure id {fid!r} (known: {FIGURE_IDS})")

    ece_bins = _take(raw, "ece_bins", 15, errors, "config", int)
    if ece_bins < 1:
        errors.append("config.ece_bins: must be >= 1")
    threads = _take(raw, "threads", 1, errors, "config", int)
    if threads < 1:
        errors.append("config.threads: must be >= 1")

    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))

    return ExperimentConfig(
        seed=seed,
        output_dir=raw.get("output_dir", "runs/out"),
        dataset=dataset,
        model=model,
        train=train,
        checkpoint=raw.get("checkpoint"),
        cells=cells,
        metrics=metrics,
        ece_bins=ece_bins,
        analytic=analytic,
        figures=figures,
        threads=threads,
    )


def load_config(path, seed_override=None) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    if seed_override is not None:
        raw["seed"] = seed_override
        # derived component seeds follow the override unless explicitly pinned
    return parse_config(raw)
