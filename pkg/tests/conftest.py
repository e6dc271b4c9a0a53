import numpy as np
import pytest

from bnalign.data import generate_shapes_dataset
from bnalign.model import build_small_cnn
from bnalign.shifts import AugmentationPolicy
from bnalign.train import TrainConfig, train

TRAIN_POLICY = AugmentationPolicy(pad=3, flip_prob=0.5, enabled=True)


def quick_config(seed, epochs=6, augment=TRAIN_POLICY):
    return TrainConfig(
        epochs=epochs,
        batch_size=64,
        lr=0.05,
        momentum=0.9,
        weight_decay=5e-4,
        dropout=0.1,
        augment=augment,
        seed=seed,
        lr_decay_epochs=(max(epochs - 2, 1),),
        lr_decay_factor=0.1,
    )


@pytest.fixture(scope="session")
def shapes_train():
    return generate_shapes_dataset(150, 4, 24, seed=1000)


@pytest.fixture(scope="session")
def shapes_eval():
    return generate_shapes_dataset(80, 4, 24, seed=2000)


@pytest.fixture(scope="session")
def trained_model(shapes_train, shapes_eval):
    """One modestly trained model with augmentation, shared across unit tests."""
    model = build_small_cnn(4, seed=0)
    train(model, shapes_train, quick_config(seed=0))
    return model


@pytest.fixture(scope="session")
def noaug_model(shapes_train):
    """Trained without augmentation: its EMA tracks the raw training set.

    Two step decays freeze the weights early enough for the EMA to settle
    onto the final statistics.
    """
    model = build_small_cnn(4, seed=3)
    cfg = TrainConfig(
        epochs=10,
        batch_size=64,
        lr=0.05,
        dropout=0.1,
        augment=AugmentationPolicy(enabled=False),
        seed=3,
        lr_decay_epochs=(5, 7),
        lr_decay_factor=0.1,
    )
    train(model, shapes_train, cfg)
    return model


def finite_difference(f, x, h=1e-5):
    """Central-difference gradient of scalar f w.r.t. array x (the test oracle)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def rel_error(a, b):
    """Max relative error with a unit floor, so near-zero entries compare absolutely."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))
