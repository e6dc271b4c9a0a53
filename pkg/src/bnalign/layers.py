"""Dense-tensor layer kernels with forward and backward passes.

Conventions, fixed across the package:

* activations are float64 arrays in example x channel x height x width layout;
* convolution is cross-correlation (no kernel flip), identical in forward and
  backward;
* every stochastic operation takes an explicit ``numpy.random.Generator``;
* eval-mode ``forward`` is pure; ``forward_train`` caches what ``backward``
  needs on the layer itself (the training loop is single threaded).
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, UsageError

FLOAT = np.float64


def as_activations(x) -> np.ndarray:
    """Coerce to a float64 NCHW array, rejecting anything that is not 4-D."""
    x = np.asarray(x, dtype=FLOAT)
    if x.ndim != 4:
        raise ShapeError("activation rank", 4, x.ndim)
    return x


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a (batch, classes) logit array."""
    logits = np.asarray(logits, dtype=FLOAT)
    if logits.ndim != 2:
        raise ShapeError("logit rank", 2, logits.ndim)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("output spatial extent", ">= 1", (ho, wo))
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=FLOAT)
        xp[:, :, pad : pad + h, pad : pad + w] = x
    else:
        xp = x
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=FLOAT)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int, ho: int, wo: int):
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=FLOAT)
    dcols = dcols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
    if pad:
        return dxp[:, :, pad : pad + h, pad : pad + w]
    return dxp


def conv2d_forward(x, weights, bias=None, stride: int = 1, zero_pad: int = 0) -> np.ndarray:
    """Cross-correlate ``x`` (N,C,H,W) with ``weights`` (O,C,kh,kw).

    Output spatial extent is floor((H + 2*pad - k)/stride) + 1.  ``bias`` is a
    per-output-channel vector or None.
    """
    x = as_activations(x)
    weights = np.asarray(weights, dtype=FLOAT)
    if weights.ndim != 4:
        raise ShapeError("weight rank", 4, weights.ndim)
    if stride < 1:
        raise ShapeError("stride", ">= 1", stride)
    if zero_pad < 0:
        raise ShapeError("zero_pad", ">= 0", zero_pad)
    o, ci, kh, kw = weights.shape
    if x.shape[1] != ci:
        raise ShapeError("input channels", ci, x.shape[1])
    cols, ho, wo = _im2col(x, kh, kw, stride, zero_pad)
    out = np.matmul(weights.reshape(o, ci * kh * kw), cols).reshape(x.shape[0], o, ho, wo)
    if bias is not None:
        bias = np.asarray(bias, dtype=FLOAT)
        if bias.shape != (o,):
            raise ShapeError("bias length", o, bias.shape)
        out += bias[None, :, None, None]
    return out


class Layer:
    """Base layer: parameterless, stateless in eval mode."""

    kind = "layer"

    def params(self) -> dict:
        return {}

    def grads(self) -> dict:
        return {}

    def forward(self, x):
        raise NotImplementedError

    def forward_train(self, x, rng=None):
        return self.forward(x)

    def backward(self, grad):
        raise NotImplementedError

    def _take_cache(self):
        cache = getattr(self, "_cache", None)
        if cache is None:
            raise UsageError(f"{self.kind}: backward called before a training forward pass")
        self._cache = None
        return cache

    def spec(self) -> dict:
        return {"kind": self.kind}


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, pad=0, bias=True, rng=None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.pad = pad
        fan_in = in_channels * kernel_size * kernel_size
        if rng is None:
            rng = np.random.default_rng(0)
        # He initialization; the ReLU blocks downstream expect it.
        self.weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_channels, in_channels, kernel_size, kernel_size)).astype(FLOAT)
        self.bias = np.zeros(out_channels, dtype=FLOAT) if bias else None
        self.weight_grad = None
        self.bias_grad = None
        self._cache = None

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def grads(self):
        g = {"weight": self.weight_grad}
        if self.bias is not None:
            g["bias"] = self.bias_grad
        return g

    def forward(self, x):
        return conv2d_forward(x, self.weight, self.bias, self.stride, self.pad)

    def forward_train(self, x, rng=None):
        x = as_activations(x)
        if x.shape[1] != self.in_channels:
            raise ShapeError("input channels", self.in_channels, x.shape[1])
        k = self.kernel_size
        cols, ho, wo = _im2col(x, k, k, self.stride, self.pad)
        w2 = self.weight.reshape(self.out_channels, -1)
        out = np.matmul(w2, cols).reshape(x.shape[0], self.out_channels, ho, wo)
        if self.bias is not None:
            out += self.bias[None, :, None, None]
        self._cache = (x.shape, cols, ho, wo)
        return out

    def backward(self, grad):
        x_shape, cols, ho, wo = self._take_cache()
        n = x_shape[0]
        k = self.kernel_size
        g2 = grad.reshape(n, self.out_channels, ho * wo)
        self.weight_grad = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(self.weight.shape)
        if self.bias is not None:
            self.bias_grad = g2.sum(axis=(0, 2))
        w2 = self.weight.reshape(self.out_channels, -1)
        dcols = np.matmul(w2.T, g2)
        return _col2im(dcols, x_shape, k, k, self.stride, self.pad, ho, wo)

    def spec(self):
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "pad": self.pad,
            "has_bias": self.bias is not None,
        }


class ReLU(Layer):
    kind = "relu"

    def __init__(self):
        self._cache = None

    def forward(self, x):
        return np.maximum(np.asarray(x, dtype=FLOAT), 0.0)

    def forward_train(self, x, rng=None):
        x = np.asarray(x, dtype=FLOAT)
        self._cache = x > 0
        return np.maximum(x, 0.0)

    def backward(self, grad):
        mask = self._take_cache()
        return grad * mask


def _pool_prepare(x, window, stride):
    x = as_activations(x)
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError("pool window", f"<= spatial extent {(h, w)}", window)
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    view = np.empty((n, c, ho, wo, window * window), dtype=FLOAT)
    idx = 0
    for i in range(window):
        for j in range(window):
            view[:, :, :, :, idx] = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            idx += 1
    return x, view, ho, wo


class MaxPool2D(Layer):
    kind = "max-pool"

    def __init__(self, window, stride=None):
        self.window = window
        self.stride = window if stride is None else stride
        self._cache = None

    def forward(self, x):
        _, view, _, _ = _pool_prepare(x, self.window, self.stride)
        return view.max(axis=4)

    def forward_train(self, x, rng=None):
        x, view, ho, wo = _pool_prepare(x, self.window, self.stride)
        arg = view.argmax(axis=4)  # first index wins ties
        self._cache = (x.shape, arg, ho, wo)
        return view.max(axis=4)

    def backward(self, grad):
        x_shape, arg, ho, wo = self._take_cache()
        dview = np.zeros((x_shape[0], x_shape[1], ho, wo, self.window * self.window), dtype=FLOAT)
        np.put_along_axis(dview, arg[..., None], grad[..., None], axis=4)
        return _col2im(
            dview.transpose(0, 1, 4, 2, 3).reshape(x_shape[0], -1, ho * wo),
            x_shape,
            self.window,
            self.window,
            self.stride,
            0,
            ho,
            wo,
        )

    def spec(self):
        return {"kind": self.kind, "window": self.window, "stride": self.stride}


class AvgPool2D(Layer):
    kind = "avg-pool"

    def __init__(self, window, stride=None):
        self.window = window
        self.stride = window if stride is None else stride
        self._cache = None

    def forward(self, x):
        _, view, _, _ = _pool_prepare(x, self.window, self.stride)
        return view.mean(axis=4)

    def forward_train(self, x, rng=None):
        x, view, ho, wo = _pool_prepare(x, self.window, self.stride)
        self._cache = (x.shape, ho, wo)
        return view.mean(axis=4)

    def backward(self, grad):
        x_shape, ho, wo = self._take_cache()
        k2 = self.window * self.window
        dview = np.repeat(grad[..., None] / k2, k2, axis=4)
        return _col2im(
            dview.transpose(0, 1, 4, 2, 3).reshape(x_shape[0], -1, ho * wo),
            x_shape,
            self.window,
            self.window,
            self.stride,
            0,
            ho,
            wo,
        )

    def spec(self):
        return {"kind": self.kind, "window": self.window, "stride": self.stride}


class Flatten(Layer):
    kind = "flatten"

    def __init__(self):
        self._cache = None

    def forward(self, x):
        x = np.asarray(x, dtype=FLOAT)
        return x.reshape(x.shape[0], -1)

    def forward_train(self, x, rng=None):
        x = np.asarray(x, dtype=FLOAT)
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        shape = self._take_cache()
        return grad.reshape(shape)


class Dense(Layer):
    """Fully connected layer; optional inverted dropout on its input in train mode."""

    kind = "dense"

    def __init__(self, in_features, out_features, dropout=0.0, rng=None):
        self.in_features = in_features
        self.out_features = out_features
        self.dropout = dropout
        if rng is None:
            rng = np.random.default_rng(0)
        self.weight = rng.normal(0.0, np.sqrt(2.0 / in_features), size=(in_features, out_features)).astype(FLOAT)
        self.bias = np.zeros(out_features, dtype=FLOAT)
        self.weight_grad = None
        self.bias_grad = None
        self._cache = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def grads(self):
        return {"weight": self.weight_grad, "bias": self.bias_grad}

    def forward(self, x):
        x = np.asarray(x, dtype=FLOAT)
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError("dense input features", self.in_features, x.shape[1:] if x.ndim == 2 else x.shape)
        return x @ self.weight + self.bias

    def forward_train(self, x, rng=None):
        x = np.asarray(x, dtype=FLOAT)
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError("dense input features", self.in_features, x.shape[1:] if x.ndim == 2 else x.shape)
        mask = None
        if self.dropout > 0.0:
            if rng is None:
                raise UsageError("dense: dropout requires an explicit rng in train mode")
            keep = 1.0 - self.dropout
            mask = (rng.random(x.shape) < keep) / keep
            x = x * mask
        self._cache = (x, mask)
        return x @ self.weight + self.bias

    def backward(self, grad):
        x, mask = self._take_cache()
        self.weight_grad = x.T @ grad
        self.bias_grad = grad.sum(axis=0)
        dx = grad @ self.weight.T
        if mask is not None:
            dx = dx * mask
        return dx

    def spec(self):
        return {
            "kind": self.kind,
            "in_features": self.in_features,
            "out_features": self.out_features,
            "dropout": self.dropout,
        }


class ChannelAffine(Layer):
    """Fixed per-channel affine map a*x + b, shared over examples and positions.

    Not trainable; used to inject controlled shifts at a chosen depth.
    """

    kind = "channel-affine"

    def __init__(self, scale, shift):
        self.scale = np.atleast_1d(np.asarray(scale, dtype=FLOAT))
        self.shift = np.atleast_1d(np.asarray(shift, dtype=FLOAT))
        self._cache = None

    def forward(self, x):
        x = as_activations(x)
        c = x.shape[1]
        scale = self.scale if self.scale.size > 1 else np.full(c, self.scale[0])
        shift = self.shift if self.shift.size > 1 else np.full(c, self.shift[0])
        if scale.size != c:
            raise ShapeError("affine scale length", c, scale.size)
        return x * scale[None, :, None, None] + shift[None, :, None, None]

    def forward_train(self, x, rng=None):
        self._cache = True
        return self.forward(x)

    def backward(self, grad):
        self._take_cache()
        c = grad.shape[1]
        scale = self.scale if self.scale.size > 1 else np.full(c, self.scale[0])
        return grad * scale[None, :, None, None]

    def spec(self):
        return {"kind": self.kind}


class SoftmaxCrossEntropyHead:
    """Classification head: softmax probabilities and mean cross-entropy loss."""

    kind = "softmax-cross-entropy-head"

    def probs(self, logits):
        return softmax(logits)

    def loss_and_grad(self, logits, labels):
        """Return (mean NLL, gradient w.r.t. logits)."""
        p = softmax(logits)
        n = logits.shape[0]
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise ShapeError("label count", n, labels.shape)
        picked = p[np.arange(n), labels]
        loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
        grad = p.copy()
        grad[np.arange(n), labels] -= 1.0
        return loss, grad / n

    def spec(self):
        return {"kind": self.kind}
