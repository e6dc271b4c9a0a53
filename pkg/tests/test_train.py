import numpy as np
import pytest

from conftest import quick_config

from bnalign.data import LabeledDataset, generate_shapes_dataset
from bnalign.errors import ConfigError, TrainingDivergedError
from bnalign.layers import Dense
from bnalign.metrics import accuracy
from bnalign.model import Model, build_dense_net, build_small_cnn
from bnalign.shifts import AugmentationPolicy
from bnalign.train import TrainConfig, evaluate, isolate_bn_state, train, write_train_log_csv
from bnalign.train import _sgd_step


def separable_toy(n=128, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    x = np.where(labels[:, None] == 1, 0.8, 0.2) + rng.normal(0, 0.05, size=(n, 2))
    images = np.clip(x, 0, 1).reshape(n, 1, 1, 2)
    return LabeledDataset(images, labels.astype(np.int64), n_classes=2)


def test_zero_lr_leaves_weights_unchanged():
    ds = generate_shapes_dataset(20, 4, 16, seed=31)
    model = build_small_cnn(4, image_size=16, seed=31)
    before = [arr.copy() for _, _, arr in model.parameters()]
    cfg = TrainConfig(epochs=2, batch_size=16, lr=0.0, seed=1, augment=AugmentationPolicy(enabled=False), lr_decay_epochs=())
    train(model, ds, cfg)
    after = [arr for _, _, arr in model.parameters()]
    for a, b in zip(before, after):
        assert np.array_equal(a, b)


def test_separable_toy_reaches_99_percent():
    ds = separable_toy()
    model = build_dense_net(2, 2, seed=2)
    cfg = TrainConfig(epochs=50, batch_size=16, lr=0.5, momentum=0.9, weight_decay=0.0,
                      dropout=0.0, seed=2, augment=AugmentationPolicy(enabled=False), lr_decay_epochs=())
    log = train(model, ds, cfg)
    assert log[-1].train_acc >= 0.99


def test_training_is_bit_deterministic():
    ds = generate_shapes_dataset(20, 4, 16, seed=33)
    results = []
    for _ in range(2):
        model = build_small_cnn(4, image_size=16, seed=9)
        train(model, ds, quick_config(seed=9, epochs=2))
        results.append([arr.copy() for _, _, arr in model.parameters()])
    for a, b in zip(*results):
        assert np.array_equal(a, b)


def test_sgd_update_matches_hand_stepped_oracle():
    # two parameters, two steps, hand-rolled: g += lam*w; v = beta*v + g; w -= lr*v
    layer = Dense(1, 2, rng=np.random.default_rng(3))
    layer.weight = np.array([[1.0, -2.0]])
    layer.bias = np.zeros(2)
    model = Model([layer])
    cfg = TrainConfig(lr=0.1, momentum=0.9, weight_decay=0.01)
    velocity = {}

    w = np.array([[1.0, -2.0]])
    v = np.zeros((1, 2))
    for step, grad in enumerate(([np.array([[0.5, -1.0]])], [np.array([[-0.25, 2.0]])])):
        layer.weight_grad = grad[0].copy()
        layer.bias_grad = np.zeros(2)
        _sgd_step(model, velocity, cfg.lr, cfg)
        g = grad[0] + cfg.weight_decay * w
        v = cfg.momentum * v + g
        w = w - cfg.lr * v
        assert np.allclose(layer.weight, w, atol=1e-15), f"step {step}"


def test_divergence_aborts_with_epoch():
    # two dense layers so the blow-up compounds multiplicatively into overflow
    ds = separable_toy()
    model = build_dense_net(2, 2, hidden=(8,), seed=4)
    cfg = TrainConfig(epochs=3, batch_size=16, lr=1e200, weight_decay=0.0, dropout=0.0,
                      seed=4, augment=AugmentationPolicy(enabled=False), lr_decay_epochs=())
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrainingDivergedError) as err:
            train(model, ds, cfg)
    assert err.value.epoch in (0, 1, 2)


def test_class_count_mismatch_rejected():
    ds = generate_shapes_dataset(5, 4, 16, seed=35)
    model = build_small_cnn(3, image_size=16, seed=5)
    with pytest.raises(ConfigError, match="classes"):
        train(model, ds, quick_config(seed=5, epochs=1))


def test_batch_size_floor():
    with pytest.raises(ConfigError, match="batch size"):
        TrainConfig(batch_size=1).validate()


def test_evaluate_is_pure_and_repeatable(trained_model, shapes_eval):
    before = isolate_bn_state(trained_model)
    r1 = evaluate(trained_model, shapes_eval)
    r2 = evaluate(trained_model, shapes_eval)
    after = isolate_bn_state(trained_model)
    assert [(x.confidence, x.predicted) for x in r1] == [(x.confidence, x.predicted) for x in r2]
    for (a1, a2, a3, a4), (b1, b2, b3, b4) in zip(before, after):
        assert np.array_equal(a1, b1) and np.array_equal(a2, b2)
        assert np.array_equal(a3, b3) and np.array_equal(a4, b4)


def test_untrained_model_near_chance():
    ds = generate_shapes_dataset(150, 4, 16, seed=36)
    model = build_small_cnn(4, image_size=16, seed=36)
    acc = accuracy(evaluate(model, ds))
    se = np.sqrt(0.25 * 0.75 / len(ds))
    assert abs(acc - 0.25) < 3 * se + 0.05


def test_duplicated_image_rows_identical(trained_model, shapes_eval):
    img = shapes_eval.images[:1]
    ds = LabeledDataset(np.repeat(img, 5, axis=0), np.zeros(5, dtype=np.int64), 4, class_subset=True)
    records = evaluate(trained_model, ds)
    assert len({(r.confidence, r.predicted) for r in records}) == 1


def test_trained_model_beats_90_percent(trained_model, shapes_eval):
    # the dataset-difficulty anchor: a small CNN must learn this quickly
    assert accuracy(evaluate(trained_model, shapes_eval)) >= 0.9


def test_train_log_csv(tmp_path, trained_model):
    ds = separable_toy()
    model = build_dense_net(2, 2, seed=6)
    cfg = TrainConfig(epochs=2, batch_size=32, lr=0.1, dropout=0.0, seed=6,
                      augment=AugmentationPolicy(enabled=False), lr_decay_epochs=())
    log = train(model, ds, cfg, val=ds)
    path = tmp_path / "log.csv"
    write_train_log_csv(log, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,loss,train_acc,val_acc"
    assert len(lines) == 3
    assert lines[1].startswith("0,")
