"""SGD training and evaluation for the small CNN.

The SGD update, with weight decay lam and momentum beta:

    g   <- grad + lam * w
    v   <- beta * v + g
    w   <- w - lr * v

Full-scale reference recipe from which the desk-scale defaults were scaled
down: 100 epochs, batch 128, lr 0.1 with step decays, momentum 0.9, weight
decay 5e-4, dropout 0.3, random crop with zero-padding 4 plus horizontal
flips.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError, TrainingDivergedError
from .metrics import PredictionRecord
from .model import Model
from .norm import BatchNorm2D
from .shifts import AugmentationPolicy, augment


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    dropout: float = 0.1
    augment: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    seed: int = 0
    lr_decay_epochs: tuple = (15,)
    lr_decay_factor: float = 0.1

    def validate(self):
        if self.batch_size < 2:
            raise ConfigError("batch size must be >= 2 (batch normalization needs that many slots)")
        for name in ("lr", "momentum", "weight_decay", "dropout", "lr_decay_factor"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        return self


@dataclass
class EpochLog:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float | None


def train(model: Model, dataset: LabeledDataset, config: TrainConfig, val: LabeledDataset | None = None):
    """Train in place; returns the per-epoch log.

    Deterministic for a fixed (config, seed): shuffling, augmentation, and
    dropout all draw from one seeded generator.  After the last epoch the BN
    source statistics (training EMA) become the active eval statistics.
    """
    config.validate()
    if dataset.n_classes != model.meta.get("classes", dataset.n_classes):
        raise ConfigError(
            f"dataset has {dataset.n_classes} classes but the model head expects {model.meta.get('classes')}"
        )
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x7E)))
    velocity = {}
    log = []
    n = len(dataset)
    lr = config.lr
    for epoch in range(config.epochs):
        if epoch in tuple(config.lr_decay_epochs):
            lr *= config.lr_decay_factor
        order = rng.permutation(n)
        losses = []
        correct = 0
        for start in range(0, n - n % config.batch_size, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = dataset.images[idx]
            yb = dataset.labels[idx]
            if config.augment.enabled:
                xb = augment(xb, config.augment, rng)
            logits = model.forward_train(xb, rng)
            loss, dlogits = model.head.loss_and_grad(logits, yb)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            losses.append(loss)
            correct += int((logits.argmax(axis=1) == yb).sum())
            model.backward(dlogits)
            _sgd_step(model, velocity, lr, config)
        seen = (n // config.batch_size) * config.batch_size
        val_acc = None
        if val is not None:
            for i in _bn_layers(model):
                model.layers[i].reset_to_source()  # eval against the current EMA
            preds, _ = model.predict(val.images)
            val_acc = float((preds == val.labels).mean())
        log.append(EpochLog(epoch, float(np.mean(losses)) if losses else 0.0, correct / seen if seen else 0.0, val_acc))
    for i in _bn_layers(model):
        model.layers[i].reset_to_source()
    return log


def _bn_layers(model):
    return model.bn_indices()


def _sgd_step(model, velocity, lr, config):
    for layer_idx, name, param in model.parameters():
        grad = model.layers[layer_idx].grads()[name]
        if grad is None:
            continue
        g = grad + config.weight_decay * param
        key = (layer_idx, name)
        v = velocity.get(key)
        if v is None:
            v = np.zeros_like(param)
            velocity[key] = v
        v *= config.momentum
        v += g
        param -= lr * v


def write_train_log_csv(log, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss,train_acc,val_acc\n")
        for row in log:
            val = "" if row.val_acc is None else repr(row.val_acc)
            fh.write(f"{row.epoch},{row.loss!r},{row.train_acc!r},{val}\n")


def evaluate(model: Model, dataset: LabeledDataset, batch_size: int = 512):
    """Eval-mode per-example records: (confidence, predicted, true).

    Never mutates the model; BN layers read their active statistics.
    """
    records = []
    for start in range(0, len(dataset), batch_size):
        xb = dataset.images[start : start + batch_size]
        yb = dataset.labels[start : start + batch_size]
        probs = model.head.probs(model.forward(xb))
        preds = probs.argmax(axis=1)
        confs = probs[np.arange(len(preds)), preds]
        for c, p, t in zip(confs, preds, yb):
            records.append(PredictionRecord(float(c), int(p), int(t)))
    return records


def isolate_bn_state(model):
    """Snapshot of every BN layer's (source, active) stats, for mutation checks."""
    state = []
    for i in model.bn_indices():
        layer = model.layers[i]
        assert isinstance(layer, BatchNorm2D)
        state.append(
            (
                layer.source_stats.mean.copy(),
                layer.source_stats.var.copy(),
                layer.active_stats.mean.copy(),
                layer.active_stats.var.copy(),
            )
        )
    return state
