import math
import warnings

import numpy as np
import pytest

from conftest import TRAIN_POLICY

from bnalign.align import AlignmentPlan, adabn, build_layer_mask, scalar_adabn
from bnalign.errors import ConfigError
from bnalign.layers import ChannelAffine
from bnalign.metrics import accuracy
from bnalign.model import Model
from bnalign.norm import BatchNorm2D, estimate_channel_stats
from bnalign.shifts import ShiftSpec, apply_shift
from bnalign.train import evaluate


def test_mask_rules(trained_model):
    total = len(trained_model.bn_indices())
    assert total == 6
    assert build_layer_mask(trained_model, "all") == tuple(range(6))
    assert build_layer_mask(trained_model, "exclude-last-k", 0) == tuple(range(6))
    assert build_layer_mask(trained_model, "exclude-last-k", total) == ()
    assert build_layer_mask(trained_model, "exclude-first-k", 2) == (2, 3, 4, 5)
    assert build_layer_mask(trained_model, "exclude-last-k", 2) == (0, 1, 2, 3)
    with pytest.raises(ConfigError):
        build_layer_mask(trained_model, "exclude-last-k", 7)


def test_scalar_adabn_identity():
    x = np.linspace(-2, 2, 9)
    out = scalar_adabn(x, (1.5, 2.0), (1.5, 2.0))
    assert np.allclose(out, x, atol=1e-14)


def test_scalar_adabn_conceptual_coefficients():
    # source (4, 1), target (2, 1/2): the map is sqrt(2) (x - 2) + 4
    x = np.array([0.0, 1.0, 2.0, 5.0])
    out = scalar_adabn(x, (4.0, 1.0), (2.0, 0.5))
    assert np.allclose(out, math.sqrt(2.0) * (x - 2.0) + 4.0, atol=1e-12)


def test_scalar_adabn_moment_matching():
    rng = np.random.default_rng(0)
    x = rng.normal(2.0, 0.7, size=5000)
    mu_t, var_t = x.mean(), x.var()
    out = scalar_adabn(x, (-1.0, 4.0), (mu_t, var_t))
    assert abs(out.mean() + 1.0) < 1e-12
    assert abs(out.var() - 4.0) < 1e-12


def test_scalar_adabn_inverts_affine_exactly():
    rng = np.random.default_rng(1)
    x = rng.normal(size=1000)
    a, b = 1.7, -0.4
    shifted = a * x + b
    out = scalar_adabn(shifted, (x.mean(), x.var()), (shifted.mean(), shifted.var()))
    assert np.abs(out - x).max() < 1e-12


def test_scalar_adabn_zero_target_variance():
    with pytest.raises(ConfigError):
        scalar_adabn(np.ones(3), (0.0, 1.0), (0.0, 0.0))


def test_empty_mask_is_a_noop(trained_model, shapes_eval):
    plan = AlignmentPlan(mask_rule="exclude-last-k", mask_k=6)
    aligned = adabn(trained_model, shapes_eval.images, plan)
    for li in trained_model.bn_indices():
        assert np.array_equal(aligned.layers[li].active_stats.mean, trained_model.layers[li].active_stats.mean)
        assert aligned.layers[li].active_source == "source"
    a0 = accuracy(evaluate(trained_model, shapes_eval))
    a1 = accuracy(evaluate(aligned, shapes_eval))
    assert a0 == a1


def test_explicit_mask_all_equals_rule_all(trained_model, shapes_eval):
    by_rule = adabn(trained_model, shapes_eval.images, AlignmentPlan(mask_rule="all"))
    by_idx = adabn(trained_model, shapes_eval.images, AlignmentPlan(mask_indices=(0, 1, 2, 3, 4, 5)))
    for li in trained_model.bn_indices():
        assert np.array_equal(by_rule.layers[li].active_stats.mean, by_idx.layers[li].active_stats.mean)
        assert np.array_equal(by_rule.layers[li].active_stats.var, by_idx.layers[li].active_stats.var)


def test_original_model_untouched(trained_model, shapes_eval):
    snapshot = [trained_model.layers[li].active_stats.mean.copy() for li in trained_model.bn_indices()]
    adabn(trained_model, shapes_eval.images, AlignmentPlan())
    for li, before in zip(trained_model.bn_indices(), snapshot):
        assert np.array_equal(trained_model.layers[li].active_stats.mean, before)
        assert trained_model.layers[li].active_source == "source"


def test_empty_target_rejected(trained_model):
    with pytest.raises(ConfigError):
        adabn(trained_model, np.zeros((0, 1, 24, 24)), AlignmentPlan())


def test_adabn_aug_requires_policy():
    with pytest.raises(ConfigError):
        AlignmentPlan(mode="adabn-aug").validate()


def test_zero_variance_channel_warns():
    model = Model([BatchNorm2D(1)])
    target = np.full((8, 1, 4, 4), 0.6)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        aligned = adabn(model, target, AlignmentPlan())
    assert any("variance is zero" in str(w.message) for w in caught)
    assert aligned.layers[0].active_stats.var[0] == 0.0


def test_adabn_is_idempotent(trained_model, shapes_eval):
    once = adabn(trained_model, shapes_eval.images, AlignmentPlan())
    twice = adabn(once, shapes_eval.images, AlignmentPlan())
    for li in once.bn_indices():
        assert np.abs(twice.layers[li].active_stats.mean - once.layers[li].active_stats.mean).max() <= 1e-10
        assert np.abs(twice.layers[li].active_stats.var - once.layers[li].active_stats.var).max() <= 1e-10


def test_alignment_stats_match_direct_estimation(trained_model, shapes_eval):
    # the first masked layer's statistics are exactly the pooled statistics of
    # what arrives there (deeper layers then see re-normalized inputs)
    aligned = adabn(trained_model, shapes_eval.images, AlignmentPlan())
    li = trained_model.bn_indices()[0]
    direct = estimate_channel_stats(trained_model.forward_to(shapes_eval.images, li))
    assert np.array_equal(aligned.layers[li].active_stats.mean, direct.mean)
    assert np.array_equal(aligned.layers[li].active_stats.var, direct.var)
    assert aligned.layers[li].active_source == "target"


def test_exact_inversion_at_each_layer(trained_model, shapes_eval):
    # inject a per-channel affine shift at a normalization layer's input; a
    # single-layer realignment must reproduce the reference model's outputs
    X = shapes_eval.images
    for ordinal, li in enumerate(trained_model.bn_indices()):
        reference = adabn(trained_model, X, AlignmentPlan(mask_indices=(ordinal,)))
        shifted = reference.copy()
        channels = shifted.layers[li].channels
        rng = np.random.default_rng(100 + ordinal)
        shifted.layers.insert(li, ChannelAffine(rng.uniform(0.5, 2.5, channels), rng.uniform(-1.0, 1.0, channels)))
        realigned = adabn(shifted, X, AlignmentPlan(mask_indices=(ordinal,)))
        diff = np.abs(realigned.forward(X) - reference.forward(X)).max()
        assert diff < 1e-8, f"layer ordinal {ordinal}: {diff}"


def test_input_rescale_restores_predictions(trained_model, shapes_eval):
    # bias-free convolutions: a global input rescale is inverted exactly, so
    # the aligned pipelines agree example by example
    base = adabn(trained_model, shapes_eval.images, AlignmentPlan())
    preds_base, _ = base.predict(shapes_eval.images)
    for a in (0.5, 2.0):
        scaled = apply_shift(shapes_eval, ShiftSpec(kind="affine-channel", a=a, b=0.0, r=0.0))
        aligned = adabn(trained_model, scaled.images, AlignmentPlan())
        preds, _ = aligned.predict(scaled.images)
        assert np.array_equal(preds, preds_base), f"a={a}"


def test_self_alignment_with_training_augmentation(trained_model, shapes_train, shapes_eval):
    # aligning on the training set under the training augmentation with the
    # EMA estimator lands near the source statistics (tolerance 0.05 in
    # normalized units) and leaves held-out accuracy within one point
    plan = AlignmentPlan(mode="adabn-aug", augment=TRAIN_POLICY, estimator="ema", ema_momentum=0.1, seed=77)
    aligned = adabn(trained_model, shapes_train.images, plan)
    for li in trained_model.bn_indices():
        src = trained_model.layers[li].source_stats
        tgt = aligned.layers[li].active_stats
        mean_shift = np.abs(tgt.mean - src.mean) / np.sqrt(src.var + 1e-5)
        sd_ratio_dev = np.abs(np.sqrt(tgt.var) / np.sqrt(np.maximum(src.var, 1e-12)) - 1.0)
        assert mean_shift.max() < 0.05
        assert sd_ratio_dev.max() < 0.05
    a0 = accuracy(evaluate(trained_model, shapes_eval))
    a1 = accuracy(evaluate(aligned, shapes_eval))
    assert abs(a1 - a0) <= 0.01


def test_ema_running_stats_close_to_exact(noaug_model, shapes_train):
    # without augmentation the training EMA tracks the exact pooled statistics
    # of the training set (tolerance 0.05 in normalized units)
    for li in noaug_model.bn_indices():
        exact = estimate_channel_stats(noaug_model.forward_to(shapes_train.images, li))
        src = noaug_model.layers[li].source_stats
        mean_shift = np.abs(exact.mean - src.mean) / np.sqrt(exact.var + 1e-5)
        sd_ratio_dev = np.abs(np.sqrt(src.var) / np.sqrt(np.maximum(exact.var, 1e-12)) - 1.0)
        assert mean_shift.max() < 0.05
        assert sd_ratio_dev.max() < 0.05


def test_joint_strategy_runs_and_differs(trained_model, shapes_eval):
    seq = adabn(trained_model, shapes_eval.images, AlignmentPlan())
    joint = adabn(trained_model, shapes_eval.images, AlignmentPlan(strategy="joint", batch_size=40))
    li = trained_model.bn_indices()[0]
    # the first layer sees raw inputs either way: statistics agree closely
    assert np.abs(seq.layers[li].active_stats.mean - joint.layers[li].active_stats.mean).max() < 1e-8
    records = evaluate(joint, shapes_eval)
    assert accuracy(records) > 0.5


def test_alignment_never_reads_labels(trained_model, shapes_eval):
    # the interface only accepts an image tensor; shuffling labels cannot
    # change the outcome because they are never passed in
    a = adabn(trained_model, shapes_eval.images, AlignmentPlan())
    b = adabn(trained_model, shapes_eval.images.copy(), AlignmentPlan())
    li = trained_model.bn_indices()[-1]
    assert np.array_equal(a.layers[li].active_stats.mean, b.layers[li].active_stats.mean)
