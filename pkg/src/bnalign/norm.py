"""Batch, group, and instance normalization with explicit, replaceable statistics.

Denominator convention: every normalizer divides by sqrt(max(variance, eps)),
i.e. eps acts as a variance floor rather than an additive fudge.  With this
convention a train-mode batch is standardized exactly (unit variance to float
rounding) whenever its variance exceeds eps, eval mode with exact statistics
reproduces train mode bit-for-bit, and replacing statistics with the exact
statistics of an affinely shifted input inverts the shift exactly.  Zero
variance channels normalize to zero with the floor engaged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateBatchError, ShapeError
from .layers import FLOAT, Layer, as_activations

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1


@dataclass
class ChannelStats:
    """Per-channel mean and biased (1/N) variance for one normalization layer."""

    mean: np.ndarray
    var: np.ndarray
    count: int = 0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=FLOAT)
        self.var = np.asarray(self.var, dtype=FLOAT)
        if self.mean.shape != self.var.shape:
            raise ShapeError("stats length", self.mean.shape, self.var.shape)
        if np.any(self.var < 0):
            raise ConfigError("channel variance must be nonnegative")

    def copy(self) -> "ChannelStats":
        return ChannelStats(self.mean.copy(), self.var.copy(), self.count)


def batch_stats(x: np.ndarray) -> ChannelStats:
    """Biased per-channel stats pooled over examples and spatial positions."""
    x = as_activations(x)
    n, c, h, w = x.shape
    slots = n * h * w
    if slots < 2:
        raise DegenerateBatchError(f"need >= 2 example x spatial slots per channel, got {slots}")
    mean = x.mean(axis=(0, 2, 3))
    var = ((x - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
    return ChannelStats(mean, var, slots)


def estimate_channel_stats(x: np.ndarray) -> ChannelStats:
    """Exact pooled stats over a full dataset of activations.

    Two passes (mean, then variance about that mean).  Dataset-level
    reductions use exactly rounded summation over per-example partials, so the
    result is bit-identical under any permutation of the examples and any
    sharding of the work.
    """
    x = as_activations(x)
    n, c, h, w = x.shape
    if n < 1:
        raise ConfigError("estimate_channel_stats: empty dataset")
    slots = n * h * w
    per_ex = x.sum(axis=(2, 3))  # (N, C); within-example order is fixed
    mean = np.array([math.fsum(per_ex[:, ch]) for ch in range(c)], dtype=FLOAT) / slots
    sq = ((x - mean[None, :, None, None]) ** 2).sum(axis=(2, 3))
    var = np.array([math.fsum(sq[:, ch]) for ch in range(c)], dtype=FLOAT) / slots
    return ChannelStats(mean, np.maximum(var, 0.0), slots)


def normalize(x: np.ndarray, stats: ChannelStats, gamma, beta, eps: float) -> np.ndarray:
    """Per-channel affine normalization using the floor-eps convention."""
    x = as_activations(x)
    denom = np.sqrt(np.maximum(stats.var, eps))
    y = (x - stats.mean[None, :, None, None]) / denom[None, :, None, None]
    return y * np.asarray(gamma, dtype=FLOAT)[None, :, None, None] + np.asarray(beta, dtype=FLOAT)[None, :, None, None]


class BatchNorm2D(Layer):
    """Batch normalization whose evaluation statistics can be swapped post hoc.

    ``source_stats`` carries the EMA gathered during training; ``active_stats``
    is what eval mode actually uses and is either the source copy or a
    target-side replacement, recorded in ``active_source``.
    """

    kind = "batch-norm"

    def __init__(self, channels, eps=DEFAULT_EPS, momentum=DEFAULT_MOMENTUM):
        if eps <= 0:
            raise ConfigError("bn epsilon must be positive")
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = np.ones(channels, dtype=FLOAT)
        self.beta = np.zeros(channels, dtype=FLOAT)
        self.source_stats = ChannelStats(np.zeros(channels), np.ones(channels), 0)
        self.active_stats = self.source_stats.copy()
        self.active_source = "source"
        self.gamma_grad = None
        self.beta_grad = None
        self._cache = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.gamma_grad, "beta": self.beta_grad}

    def set_target_stats(self, stats: ChannelStats):
        if stats.mean.shape != (self.channels,):
            raise ShapeError("target stats length", self.channels, stats.mean.shape)
        self.active_stats = stats.copy()
        self.active_source = "target"

    def reset_to_source(self):
        self.active_stats = self.source_stats.copy()
        self.active_source = "source"

    def forward(self, x):
        return normalize(x, self.active_stats, self.gamma, self.beta, self.eps)

    def forward_train(self, x, rng=None):
        x = as_activations(x)
        if x.shape[1] != self.channels:
            raise ShapeError("bn channels", self.channels, x.shape[1])
        stats = batch_stats(x)
        self.last_batch_stats = stats
        m = self.momentum
        self.source_stats = ChannelStats(
            (1 - m) * self.source_stats.mean + m * stats.mean,
            (1 - m) * self.source_stats.var + m * stats.var,
            self.source_stats.count + stats.count,
        )
        denom = np.sqrt(np.maximum(stats.var, self.eps))
        xhat = (x - stats.mean[None, :, None, None]) / denom[None, :, None, None]
        self._cache = (xhat, denom, stats.var > self.eps)
        return xhat * self.gamma[None, :, None, None] + self.beta[None, :, None, None]

    def backward(self, grad):
        xhat, denom, live = self._take_cache()
        g = grad * self.gamma[None, :, None, None]
        self.gamma_grad = (grad * xhat).sum(axis=(0, 2, 3))
        self.beta_grad = grad.sum(axis=(0, 2, 3))
        mean_g = g.mean(axis=(0, 2, 3), keepdims=True)
        mean_gx = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
        # Where the variance floor engaged, the denominator is constant and the
        # xhat term drops out of the gradient.
        corr = np.where(live[None, :, None, None], xhat * mean_gx, 0.0)
        return (g - mean_g - corr) / denom[None, :, None, None]

    def spec(self):
        return {"kind": self.kind, "channels": self.channels, "eps": self.eps, "momentum": self.momentum}


def _group_normalize_train(x, groups, eps):
    n, c, h, w = x.shape
    xg = x.reshape(n, groups, (c // groups) * h * w)
    mean = xg.mean(axis=2, keepdims=True)
    var = ((xg - mean) ** 2).mean(axis=2, keepdims=True)
    denom = np.sqrt(np.maximum(var, eps))
    xhat = ((xg - mean) / denom).reshape(n, c, h, w)
    return xhat, denom, var > eps, xg.shape[2]


class GroupNorm2D(Layer):
    """Group normalization: per-example stats over spatial positions and channel groups."""

    kind = "group-norm"

    def __init__(self, channels, groups, eps=DEFAULT_EPS):
        if channels % groups != 0:
            raise ConfigError(f"group-norm: channels {channels} not divisible by groups {groups}")
        self.channels = channels
        self.groups = groups
        self.eps = eps
        self.gamma = np.ones(channels, dtype=FLOAT)
        self.beta = np.zeros(channels, dtype=FLOAT)
        self.gamma_grad = None
        self.beta_grad = None
        self._cache = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.gamma_grad, "beta": self.beta_grad}

    def forward(self, x):
        x = as_activations(x)
        if x.shape[1] != self.channels:
            raise ShapeError("group-norm channels", self.channels, x.shape[1])
        xhat, _, _, _ = _group_normalize_train(x, self.groups, self.eps)
        return xhat * self.gamma[None, :, None, None] + self.beta[None, :, None, None]

    def forward_train(self, x, rng=None):
        x = as_activations(x)
        if x.shape[1] != self.channels:
            raise ShapeError("group-norm channels", self.channels, x.shape[1])
        xhat, denom, live, slots = _group_normalize_train(x, self.groups, self.eps)
        self._cache = (xhat, denom, live, slots, x.shape)
        return xhat * self.gamma[None, :, None, None] + self.beta[None, :, None, None]

    def backward(self, grad):
        xhat, denom, live, slots, shape = self._take_cache()
        n, c, h, w = shape
        self.gamma_grad = (grad * xhat).sum(axis=(0, 2, 3))
        self.beta_grad = grad.sum(axis=(0, 2, 3))
        g = (grad * self.gamma[None, :, None, None]).reshape(n, self.groups, slots)
        xh = xhat.reshape(n, self.groups, slots)
        mean_g = g.mean(axis=2, keepdims=True)
        mean_gx = (g * xh).mean(axis=2, keepdims=True)
        corr = np.where(live, xh * mean_gx, 0.0)
        return ((g - mean_g - corr) / denom).reshape(n, c, h, w)

    def spec(self):
        return {"kind": self.kind, "channels": self.channels, "groups": self.groups, "eps": self.eps}


class InstanceNorm2D(Layer):
    """Instance normalization: per-example, per-channel stats over spatial positions.

    Affine parameters are optional; the no-affine variant matches the common
    stylization usage.
    """

    kind = "instance-norm"

    def __init__(self, channels, affine=False, eps=DEFAULT_EPS):
        self.channels = channels
        self.affine = affine
        self.eps = eps
        if affine:
            self.gamma = np.ones(channels, dtype=FLOAT)
            self.beta = np.zeros(channels, dtype=FLOAT)
        else:
            self.gamma = None
            self.beta = None
        self.gamma_grad = None
        self.beta_grad = None
        self._cache = None

    def params(self):
        if not self.affine:
            return {}
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        if not self.affine:
            return {}
        return {"gamma": self.gamma_grad, "beta": self.beta_grad}

    def _apply_affine(self, xhat):
        if not self.affine:
            return xhat
        return xhat * self.gamma[None, :, None, None] + self.beta[None, :, None, None]

    def forward(self, x):
        x = as_activations(x)
        if x.shape[1] != self.channels:
            raise ShapeError("instance-norm channels", self.channels, x.shape[1])
        xhat, _, _, _ = _group_normalize_train(x, self.channels, self.eps)
        return self._apply_affine(xhat)

    def forward_train(self, x, rng=None):
        x = as_activations(x)
        if x.shape[1] != self.channels:
            raise ShapeError("instance-norm channels", self.channels, x.shape[1])
        xhat, denom, live, slots = _group_normalize_train(x, self.channels, self.eps)
        self._cache = (xhat, denom, live, slots, x.shape)
        return self._apply_affine(xhat)

    def backward(self, grad):
        xhat, denom, live, slots, shape = self._take_cache()
        n, c, h, w = shape
        if self.affine:
            self.gamma_grad = (grad * xhat).sum(axis=(0, 2, 3))
            self.beta_grad = grad.sum(axis=(0, 2, 3))
            g = (grad * self.gamma[None, :, None, None]).reshape(n, c, slots)
        else:
            g = grad.reshape(n, c, slots)
        xh = xhat.reshape(n, c, slots)
        mean_g = g.mean(axis=2, keepdims=True)
        mean_gx = (g * xh).mean(axis=2, keepdims=True)
        corr = np.where(live, xh * mean_gx, 0.0)
        return ((g - mean_g - corr) / denom).reshape(n, c, h, w)

    def spec(self):
        return {"kind": self.kind, "channels": self.channels, "affine": self.affine, "eps": self.eps}
