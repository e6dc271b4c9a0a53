"""Finite-difference checks of every backward pass, h = 1e-5, threshold 1e-4."""

import numpy as np
import pytest

from conftest import finite_difference, rel_error

from bnalign.layers import (
    AvgPool2D,
    ChannelAffine,
    Conv2D,
    Dense,
    Flatten,
    MaxPool2D,
    ReLU,
    SoftmaxCrossEntropyHead,
)
from bnalign.model import Model
from bnalign.norm import BatchNorm2D, GroupNorm2D, InstanceNorm2D

THRESHOLD = 1e-4


def _away_from_kinks(x, margin=1e-3):
    return np.where(np.abs(x) < margin, x + 10 * margin, x)


def _spread_ties(x, step=1e-3):
    return x + np.arange(x.size, dtype=np.float64).reshape(x.shape) * step


def layer_gradcheck(layer, x, check_params=True):
    """Compare backward() against central differences through forward_train."""
    out0 = layer.forward_train(x.copy(), np.random.default_rng(0))
    weights = np.random.default_rng(99).normal(size=out0.shape)

    def loss():
        return float(np.sum(weights * layer.forward_train(x, np.random.default_rng(0))))

    layer.forward_train(x, np.random.default_rng(0))
    analytic_dx = layer.backward(weights)
    fd_dx = finite_difference(loss, x)
    worst = rel_error(analytic_dx, fd_dx)
    if check_params:
        for name, param in layer.params().items():
            layer.forward_train(x, np.random.default_rng(0))
            layer.backward(weights)
            analytic = layer.grads()[name]
            fd = finite_difference(loss, param)
            worst = max(worst, rel_error(analytic, fd))
    return worst


@pytest.mark.parametrize(
    "name,make_layer,make_x,params",
    [
        ("conv2d", lambda rng: Conv2D(2, 3, 3, stride=2, pad=1, bias=True, rng=rng),
         lambda rng: rng.normal(size=(3, 2, 6, 6)), True),
        ("conv2d-nobias", lambda rng: Conv2D(2, 2, 3, pad=0, bias=False, rng=rng),
         lambda rng: rng.normal(size=(2, 2, 5, 5)), True),
        ("relu", lambda rng: ReLU(), lambda rng: _away_from_kinks(rng.normal(size=(2, 2, 4, 4))), False),
        ("max-pool", lambda rng: MaxPool2D(2, 2), lambda rng: _spread_ties(rng.normal(size=(2, 2, 6, 6))), False),
        ("avg-pool", lambda rng: AvgPool2D(3, 2), lambda rng: rng.normal(size=(2, 2, 7, 7)), False),
        ("flatten", lambda rng: Flatten(), lambda rng: rng.normal(size=(3, 2, 3, 3)), False),
        ("dense", lambda rng: Dense(7, 3, rng=rng), lambda rng: rng.normal(size=(4, 7)), True),
        ("channel-affine", lambda rng: ChannelAffine(rng.uniform(0.5, 2, 2), rng.normal(size=2)),
         lambda rng: rng.normal(size=(2, 2, 4, 4)), False),
        ("batch-norm", lambda rng: BatchNorm2D(2), lambda rng: rng.normal(1.5, 2.0, size=(3, 2, 5, 5)), True),
        ("group-norm", lambda rng: GroupNorm2D(4, 2), lambda rng: rng.normal(size=(3, 4, 5, 5)), True),
        ("instance-norm", lambda rng: InstanceNorm2D(2, affine=True), lambda rng: rng.normal(size=(3, 2, 5, 5)), True),
        ("instance-norm-plain", lambda rng: InstanceNorm2D(2, affine=False), lambda rng: rng.normal(size=(3, 2, 5, 5)), False),
    ],
)
def test_layer_gradients(name, make_layer, make_x, params):
    rng = np.random.default_rng(7)
    worst = layer_gradcheck(make_layer(rng), make_x(rng), params)
    assert worst < THRESHOLD, f"{name}: worst relative error {worst}"


def test_batch_norm_gradient_floored_branch():
    # variance below eps engages the floor; the denominator becomes constant
    rng = np.random.default_rng(11)
    x = 0.7 + rng.normal(0, 1e-4, size=(3, 2, 4, 4))
    worst = layer_gradcheck(BatchNorm2D(2, eps=1e-5), x, check_params=True)
    assert worst < THRESHOLD


def test_full_stack_gradient_small_model():
    # every layer kind stacked, well under 200 parameters
    rng = np.random.default_rng(13)
    model = Model(
        [
            Conv2D(1, 2, 3, pad=1, bias=False, rng=rng),
            BatchNorm2D(2),
            ReLU(),
            MaxPool2D(2),
            Conv2D(2, 2, 3, pad=1, bias=True, rng=rng),
            GroupNorm2D(2, 2),
            ReLU(),
            AvgPool2D(2),
            Flatten(),
            Dense(8, 3, rng=rng),
        ]
    )
    n_params = sum(arr.size for _, _, arr in model.parameters())
    assert n_params <= 200
    x = _away_from_kinks(rng.normal(0.2, 1.0, size=(3, 1, 8, 8)))
    y = np.array([0, 2, 1])

    def loss():
        logits = model.forward_train(x, np.random.default_rng(0))
        value, _ = model.head.loss_and_grad(logits, y)
        model._trained_forward = False
        return value

    logits = model.forward_train(x, np.random.default_rng(0))
    _, dlogits = model.head.loss_and_grad(logits, y)
    dx = model.backward(dlogits)

    worst = rel_error(dx, finite_difference(loss, x))
    for idx, name, param in model.parameters():
        model.forward_train(x, np.random.default_rng(0))
        model.backward(dlogits)
        analytic = model.layers[idx].grads()[name]
        worst = max(worst, rel_error(analytic, finite_difference(loss, param)))
    assert worst < THRESHOLD, f"full stack worst relative error {worst}"


def test_zero_upstream_gradient_zeroes_everything():
    rng = np.random.default_rng(17)
    layer = BatchNorm2D(3)
    x = rng.normal(size=(2, 3, 4, 4))
    out = layer.forward_train(x)
    dx = layer.backward(np.zeros_like(out))
    assert not dx.any() and not layer.gamma_grad.any() and not layer.beta_grad.any()


def test_head_gradient_matches_finite_differences():
    head = SoftmaxCrossEntropyHead()
    rng = np.random.default_rng(19)
    logits = rng.normal(size=(5, 4))
    labels = rng.integers(0, 4, 5)
    _, analytic = head.loss_and_grad(logits, labels)
    fd = finite_difference(lambda: head.loss_and_grad(logits, labels)[0], logits)
    assert rel_error(analytic, fd) < THRESHOLD
