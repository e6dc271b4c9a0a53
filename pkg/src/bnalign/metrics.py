"""Accuracy and calibration metrics over per-example prediction records."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError

DEFAULT_ECE_BINS = 15


@dataclass(frozen=True)
class PredictionRecord:
    confidence: float  # max softmax probability, in [0, 1]
    predicted: int
    true: int

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ConfigError(f"confidence must be in [0, 1], got {self.confidence}")

    @property
    def correct(self) -> bool:
        return self.predicted == self.true


def accuracy(records) -> float:
    records = list(records)
    if not records:
        raise ConfigError("accuracy of an empty record list is undefined")
    return sum(r.correct for r in records) / len(records)


def per_class_accuracy(records) -> dict:
    """Accuracy restricted to each true class; absent classes are absent keys."""
    totals: dict = {}
    hits: dict = {}
    for r in records:
        totals[r.true] = totals.get(r.true, 0) + 1
        hits[r.true] = hits.get(r.true, 0) + (1 if r.correct else 0)
    return {cls: hits[cls] / totals[cls] for cls in sorted(totals)}


def _bin_index(confidence: float, bins: int) -> int:
    # Equal-width right-closed bins on [0, 1]; confidence 0 joins the first
    # bin, confidence 1.0 the last.
    if confidence <= 0.0:
        return 0
    return min(bins - 1, max(0, math.ceil(confidence * bins) - 1))


def ece(records, bins: int = DEFAULT_ECE_BINS) -> float:
    """Expected calibration error: bin-weighted |accuracy - confidence| gap.

    Empty bins contribute zero.  The result is order-invariant and always in
    [0, 1].
    """
    records = list(records)
    if not records:
        raise ConfigError("ECE of an empty record list is undefined")
    if bins < 1:
        raise ConfigError("ECE needs at least one bin")
    confs: list = [[] for _ in range(bins)]
    hit_sums = [0] * bins
    for r in records:
        b = _bin_index(r.confidence, bins)
        confs[b].append(r.confidence)
        hit_sums[b] += 1 if r.correct else 0
    n = len(records)
    # fsum keeps the result exactly independent of record order
    return math.fsum(
        len(confs[b]) / n * abs(hit_sums[b] / len(confs[b]) - math.fsum(confs[b]) / len(confs[b]))
        for b in range(bins)
        if confs[b]
    )
