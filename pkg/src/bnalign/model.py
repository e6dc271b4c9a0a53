"""Model container, the default small CNN, and the binary checkpoint format.

Checkpoint layout (version 1), documented byte-exactly in docs/formats.md:
magic ``b"BNALCKPT"``, u32-LE version, u32-LE header length, UTF-8 JSON header
(layer table plus named-array table with offsets), then all arrays
concatenated as little-endian float64.
"""

from __future__ import annotations

import copy
import json
import struct

import numpy as np

from .errors import ConfigError, ShapeError, UsageError
from .layers import (
    FLOAT,
    AvgPool2D,
    ChannelAffine,
    Conv2D,
    Dense,
    Flatten,
    MaxPool2D,
    ReLU,
    SoftmaxCrossEntropyHead,
)
from .norm import BatchNorm2D, ChannelStats, GroupNorm2D, InstanceNorm2D

MAGIC = b"BNALCKPT"
VERSION = 1


class Model:
    """Ordered layer list ending in a softmax cross-entropy head."""

    def __init__(self, layers, head=None, meta=None):
        self.layers = list(layers)
        self.head = head or SoftmaxCrossEntropyHead()
        self.meta = dict(meta or {})
        self._trained_forward = False

    # -- forward / backward -------------------------------------------------

    def forward(self, x):
        """Eval-mode logits; pure, BN layers use their active statistics."""
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def forward_train(self, x, rng):
        for layer in self.layers:
            x = layer.forward_train(x, rng)
        self._trained_forward = True
        return x

    def backward(self, dlogits):
        if not self._trained_forward:
            raise UsageError("model: backward called before a training forward pass")
        grad = dlogits
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        self._trained_forward = False
        return grad

    def forward_to(self, x, layer_index):
        """Eval-mode activations entering ``layers[layer_index]``."""
        if not 0 <= layer_index <= len(self.layers):
            raise ShapeError("layer index", f"0..{len(self.layers)}", layer_index)
        for layer in self.layers[:layer_index]:
            x = layer.forward(x)
        return x

    def predict(self, x):
        """Return (predicted labels, max softmax confidence) in eval mode."""
        probs = self.head.probs(self.forward(x))
        labels = probs.argmax(axis=1)
        return labels, probs[np.arange(len(labels)), labels]

    # -- introspection ------------------------------------------------------

    def bn_indices(self):
        """Layer-list indices of BatchNorm2D layers, in depth order."""
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, BatchNorm2D)]

    def parameters(self):
        """List of (layer_index, name, array) for every learnable tensor."""
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                out.append((i, name, arr))
        return out

    def copy(self) -> "Model":
        return copy.deepcopy(self)


def build_small_cnn(
    classes,
    image_size=24,
    in_channels=1,
    channels=(8, 8, 16, 16, 32, 32),
    norm="batch",
    bn_eps=1e-5,
    bn_momentum=0.1,
    dropout=0.1,
    conv_bias=False,
    seed=0,
):
    """Default desk-scale CNN: six conv+norm+ReLU blocks, pooling, dense head.

    Six normalization layers keep first-half/last-half layer masks well
    defined and leave enough depth for statistic mismatches to compound
    instead of being repaired by the next re-estimated layer.  Convolutions
    are bias-free by default; a bias would be absorbed by the following
    normalization anyway, and the bias-free form keeps the network positively
    homogeneous below the first norm layer.
    """
    if image_size % 4 != 0 or image_size < 12:
        raise ConfigError(f"image_size must be a multiple of 4 and >= 12, got {image_size}")
    if len(channels) != 6:
        raise ConfigError(f"expected six conv block widths, got {len(channels)}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0)))

    def make_norm(c):
        if norm == "batch":
            return BatchNorm2D(c, eps=bn_eps, momentum=bn_momentum)
        if norm.startswith("group"):
            groups = int(norm.split(":")[1]) if ":" in norm else 4
            return GroupNorm2D(c, groups, eps=bn_eps)
        if norm == "instance":
            return InstanceNorm2D(c, affine=True, eps=bn_eps)
        raise ConfigError(f"unknown norm kind: {norm!r}")

    layers = []
    prev = in_channels
    # spatial plan: full res x2, half res x2, quarter res x2, then avg-pool
    for i, c in enumerate(channels):
        layers.append(Conv2D(prev, c, 3, pad=1, bias=conv_bias, rng=rng))
        layers.append(make_norm(c))
        layers.append(ReLU())
        if i in (1, 3):
            layers.append(MaxPool2D(2))
        elif i == 5:
            layers.append(AvgPool2D(2))
        prev = c
    side = image_size // 8
    layers.append(Flatten())
    layers.append(Dense(channels[-1] * side * side, classes, dropout=dropout, rng=rng))
    meta = {
        "classes": classes,
        "image_size": image_size,
        "in_channels": in_channels,
        "channels": list(channels),
        "norm": norm,
        "dropout": dropout,
        "conv_bias": conv_bias,
        "seed": seed,
    }
    return Model(layers, meta=meta)


def build_dense_net(in_features, classes, hidden=(), dropout=0.0, seed=0):
    """Dense-only classifier used by toy separability experiments.

    Accepts the same NCHW batches as the CNNs (flattened internally).
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD0)))
    layers = [Flatten()]
    prev = in_features
    for h in hidden:
        layers.append(Dense(prev, h, rng=rng))
        layers.append(ReLU())
        prev = h
    layers.append(Dense(prev, classes, dropout=dropout, rng=rng))
    meta = {"classes": classes, "in_features": in_features, "dense_only": True, "seed": seed}
    return Model(layers, meta=meta)


# -- checkpoint serialization ---------------------------------------------


def _layer_arrays(layer):
    """Named float64 arrays owned by a layer, stats included."""
    arrays = dict(layer.params())
    if isinstance(layer, BatchNorm2D):
        arrays["source_mean"] = layer.source_stats.mean
        arrays["source_var"] = layer.source_stats.var
        arrays["active_mean"] = layer.active_stats.mean
        arrays["active_var"] = layer.active_stats.var
    if isinstance(layer, ChannelAffine):
        arrays["scale"] = layer.scale
        arrays["shift"] = layer.shift
    return arrays


def save_model(model: Model, path):
    table = []
    payload = []
    offset = 0
    for i, layer in enumerate(model.layers):
        entry = {"spec": layer.spec(), "arrays": []}
        if isinstance(layer, BatchNorm2D):
            entry["spec"]["active_source"] = layer.active_source
            entry["spec"]["source_count"] = layer.source_stats.count
            entry["spec"]["active_count"] = layer.active_stats.count
        for name, arr in sorted(_layer_arrays(layer).items()):
            arr = np.ascontiguousarray(arr, dtype=FLOAT)
            entry["arrays"].append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
            payload.append(arr)
            offset += arr.size
        table.append(entry)
    header = {
        "version": VERSION,
        "meta": model.meta,
        "head": model.head.spec(),
        "layers": table,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for arr in payload:
            fh.write(arr.astype("<f8").tobytes())


def _layer_from_spec(spec):
    kind = spec["kind"]
    if kind == "conv2d":
        layer = Conv2D(
            spec["in_channels"], spec["out_channels"], spec["kernel_size"],
            stride=spec["stride"], pad=spec["pad"], bias=spec["has_bias"],
        )
        return layer
    if kind == "batch-norm":
        return BatchNorm2D(spec["channels"], eps=spec["eps"], momentum=spec["momentum"])
    if kind == "group-norm":
        return GroupNorm2D(spec["channels"], spec["groups"], eps=spec["eps"])
    if kind == "instance-norm":
        return InstanceNorm2D(spec["channels"], affine=spec["affine"], eps=spec["eps"])
    if kind == "relu":
        return ReLU()
    if kind == "max-pool":
        return MaxPool2D(spec["window"], spec["stride"])
    if kind == "avg-pool":
        return AvgPool2D(spec["window"], spec["stride"])
    if kind == "flatten":
        return Flatten()
    if kind == "dense":
        return Dense(spec["in_features"], spec["out_features"], dropout=spec["dropout"])
    if kind == "channel-affine":
        return ChannelAffine(1.0, 0.0)
    raise ConfigError(f"unknown layer kind in checkpoint: {kind!r}")


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ConfigError(f"not a checkpoint file (bad magic {magic!r})")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        data = np.frombuffer(fh.read(), dtype="<f8").astype(FLOAT)

    layers = []
    for entry in header["layers"]:
        layer = _layer_from_spec(entry["spec"])
        arrays = {}
        for rec in entry["arrays"]:
            arr = data[rec["offset"] : rec["offset"] + rec["count"]].reshape(rec["shape"]).copy()
            arrays[rec["name"]] = arr
        for name, arr in arrays.items():
            if name == "source_mean":
                continue  # handled with its variance below
            if name in ("source_var", "active_mean", "active_var"):
                continue
            setattr(layer, name, arr)
        if isinstance(layer, BatchNorm2D):
            layer.source_stats = ChannelStats(arrays["source_mean"], arrays["source_var"], entry["spec"].get("source_count", 0))
            layer.active_stats = ChannelStats(arrays["active_mean"], arrays["active_var"], entry["spec"].get("active_count", 0))
            layer.active_source = entry["spec"].get("active_source", "source")
        layers.append(layer)
    return Model(layers, meta=header.get("meta", {}))
