import math

import numpy as np
import pytest

from bnalign.errors import ConfigError, DegenerateBatchError, ShapeError
from bnalign.norm import (
    BatchNorm2D,
    ChannelStats,
    GroupNorm2D,
    InstanceNorm2D,
    batch_stats,
    estimate_channel_stats,
)


def naive_pooled_stats(x):
    """Independent oracle: flat mean/variance per channel via exact summation."""
    n, c, h, w = x.shape
    means, varis = [], []
    for ch in range(c):
        vals = [float(v) for v in x[:, ch].reshape(-1)]
        m = math.fsum(vals) / len(vals)
        v = math.fsum([(u - m) ** 2 for u in vals]) / len(vals)
        means.append(m)
        varis.append(v)
    return np.array(means), np.array(varis)


def test_hand_case_two_slots():
    x = np.array([2.0, 4.0]).reshape(2, 1, 1, 1)
    stats = batch_stats(x)
    assert stats.mean[0] == 3.0 and stats.var[0] == 1.0
    out = BatchNorm2D(1).forward_train(x)
    assert np.array_equal(out.reshape(-1), [-1.0, 1.0])


def test_train_mode_standardizes_exactly():
    rng = np.random.default_rng(0)
    bn = BatchNorm2D(3)
    x = rng.normal(2.0, 3.0, size=(8, 3, 6, 6))
    out = bn.forward_train(x)
    mean = out.mean(axis=(0, 2, 3))
    var = out.var(axis=(0, 2, 3))
    assert np.abs(mean).max() < 1e-10
    assert np.abs(var - 1.0).max() < 1e-8  # variance floor is inactive here


def test_constant_channel_normalizes_to_zero():
    bn = BatchNorm2D(1)
    x = np.full((4, 1, 3, 3), 7.5)
    out = bn.forward_train(x)
    assert not out.any()
    assert bn.last_batch_stats.mean[0] == 7.5 and bn.last_batch_stats.var[0] == 0.0


def test_standardized_input_passes_through_affine():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, 2, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    bn = BatchNorm2D(2)
    bn.gamma = np.array([2.0, 0.5])
    bn.beta = np.array([-1.0, 3.0])
    out = bn.forward_train(x)
    expected = x * bn.gamma[None, :, None, None] + bn.beta[None, :, None, None]
    assert np.abs(out - expected).max() < 1e-10


def test_degenerate_single_slot_batch():
    with pytest.raises(DegenerateBatchError):
        batch_stats(np.zeros((1, 2, 1, 1)))


def test_eval_matches_train_with_exact_batch_stats():
    rng = np.random.default_rng(2)
    x = rng.normal(1.0, 2.0, size=(5, 3, 4, 4))
    bn = BatchNorm2D(3)
    out_train = bn.forward_train(x)
    bn.set_target_stats(bn.last_batch_stats)
    out_eval = bn.forward(x)
    assert np.abs(out_train - out_eval).max() < 1e-10


def test_eval_direct_formula():
    # mu=4, var=1 active stats, input 2, gamma=1, beta=0 -> output -2 (exact
    # under the variance-floor convention for any eps <= 1)
    bn = BatchNorm2D(1)
    bn.set_target_stats(ChannelStats(np.array([4.0]), np.array([1.0])))
    out = bn.forward(np.full((1, 1, 1, 1), 2.0))
    assert out.reshape(()) == -2.0


def test_eval_realizes_alignment_map_with_source_affine():
    # replacing active stats with target stats and folding the source stats
    # into (gamma, beta) realizes (sig_s/sig_t)(x - mu_t) + mu_s
    from bnalign.align import scalar_adabn

    mu_s, var_s, mu_t, var_t = 4.0, 1.0, 2.0, 0.5
    bn = BatchNorm2D(1)
    bn.gamma = np.array([math.sqrt(var_s)])
    bn.beta = np.array([mu_s])
    bn.set_target_stats(ChannelStats(np.array([mu_t]), np.array([var_t])))
    x = np.linspace(-3, 7, 11).reshape(1, 1, 1, 11)
    out = bn.forward(x)
    expected = scalar_adabn(x, (mu_s, var_s), (mu_t, var_t))
    assert np.abs(out - expected).max() < 1e-12


def test_eval_is_affine_per_channel():
    rng = np.random.default_rng(3)
    bn = BatchNorm2D(2)
    bn.set_target_stats(ChannelStats(rng.normal(size=2), rng.uniform(0.5, 2.0, 2)))
    bn.gamma = rng.uniform(0.5, 2.0, 2)
    bn.beta = rng.normal(size=2)
    x0 = rng.normal(size=(1, 2, 1, 1))
    x1 = rng.normal(size=(1, 2, 1, 1))
    y0, y1 = bn.forward(x0), bn.forward(x1)
    ymid = bn.forward(0.5 * (x0 + x1))
    assert np.abs(ymid - 0.5 * (y0 + y1)).max() < 1e-12


def test_group_norm_group_size_validation():
    with pytest.raises(ConfigError):
        GroupNorm2D(6, 4)


def test_group_norm_hand_case():
    gn = GroupNorm2D(1, 1)
    out = gn.forward(np.array([0.0, 2.0]).reshape(1, 1, 1, 2))
    assert np.array_equal(out.reshape(-1), [-1.0, 1.0])


def test_group_norm_one_group_is_layerwide():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 4, 5, 5))
    out = GroupNorm2D(4, 1).forward(x)
    flat = out.reshape(3, -1)
    assert np.abs(flat.mean(axis=1)).max() < 1e-10
    assert np.abs(flat.var(axis=1) - 1.0).max() < 1e-8


def test_group_norm_full_groups_equals_instance_norm():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 4, 6, 6))
    gn = GroupNorm2D(4, 4)
    inorm = InstanceNorm2D(4, affine=True)
    gamma = rng.uniform(0.5, 2.0, 4)
    beta = rng.normal(size=4)
    gn.gamma = gamma.copy()
    gn.beta = beta.copy()
    inorm.gamma = gamma.copy()
    inorm.beta = beta.copy()
    assert np.array_equal(gn.forward(x), inorm.forward(x))


def test_instance_norm_affine_invariance_exact():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(4, 3, 6, 6))
    scale = rng.uniform(0.5, 3.0, size=(4, 3, 1, 1))
    shift = rng.normal(size=(4, 3, 1, 1))
    inorm = InstanceNorm2D(3, affine=False)
    assert np.abs(inorm.forward(scale * x + shift) - inorm.forward(x)).max() < 1e-10


def test_channel_stats_validation():
    with pytest.raises(ConfigError):
        ChannelStats(np.zeros(2), np.array([-1.0, 0.0]))
    with pytest.raises(ShapeError):
        ChannelStats(np.zeros(2), np.zeros(3))


def test_estimate_matches_naive_oracle():
    rng = np.random.default_rng(7)
    x = rng.normal(1.0, 2.5, size=(30, 3, 4, 5))
    stats = estimate_channel_stats(x)
    mean, var = naive_pooled_stats(x)
    assert np.abs(stats.mean - mean).max() < 1e-12
    assert np.abs(stats.var - var).max() < 1e-12
    assert stats.count == 30 * 4 * 5


def test_estimate_is_exactly_permutation_invariant():
    rng = np.random.default_rng(8)
    x = rng.normal(3.0, 2.0, size=(64, 2, 8, 8))
    a = estimate_channel_stats(x)
    for trial in range(3):
        b = estimate_channel_stats(x[rng.permutation(64)])
        assert np.array_equal(a.mean, b.mean)
        assert np.array_equal(a.var, b.var)


def test_estimate_all_zero_dataset():
    stats = estimate_channel_stats(np.zeros((5, 2, 3, 3)))
    assert not stats.mean.any() and not stats.var.any()


def test_estimate_two_coordinate_toy_pooled_mean():
    # x1 ~ N(4 + 2y, 1) with y uniform over {-1, +1}, x2 set to zero: the
    # pooled mean over both coordinates is (4 + 0) / 2 = 2
    rng = np.random.default_rng(9)
    n = 20000
    y = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    x1 = rng.normal(4.0 + 2.0 * y, 1.0)
    imgs = np.stack([x1, np.zeros(n)], axis=1).reshape(n, 1, 1, 2)
    stats = estimate_channel_stats(imgs)
    assert abs(stats.mean[0] - 2.0) < 0.05
