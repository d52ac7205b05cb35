import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudmatch.augment import RectMask, sample_rect_mask
from cloudmatch.errors import ContractError, DimensionError
from cloudmatch.losses import (
    AdaptiveThreshold,
    LossWeights,
    PseudoLabelMap,
    make_pseudolabel,
    mix_weak_features,
    one_hot,
    supervised_loss,
    total_loss,
    update_adaptive_threshold,
    view_consistency_loss,
    w2s_loss,
)
from cloudmatch.tensor import Tensor, softmax_channels

from oracles import numeric_grad, rel_error, supervised_ce, view_consistency, w2s_ce


def probs_from(z):
    return softmax_channels(Tensor(z)).data


# -- supervised -----------------------------------------------------------------


def test_supervised_perfect_and_uniform():
    labels = np.array([[0, 1], [1, 1]])
    t = one_hot(labels)
    assert supervised_loss(Tensor(t), t).item() == 0.0
    uniform = np.full((2, 2, 2), 0.5)
    # pixel-mean of N * ln 2 over N pixels
    assert abs(supervised_loss(Tensor(uniform), t).item() - math.log(2)) < 1e-15


def test_supervised_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        p = probs_from(rng.normal(size=(2, 4, 4)) * 3)
        labels = rng.integers(0, 2, size=(4, 4))
        assert abs(supervised_loss(Tensor(p), one_hot(labels)).item() - supervised_ce(p, labels)) < 1e-10


def test_supervised_rejects_soft_targets_and_bad_shapes():
    with pytest.raises(ContractError):
        supervised_loss(Tensor(np.full((2, 2, 2), 0.5)), np.full((2, 2, 2), 0.5))
    with pytest.raises(DimensionError):
        supervised_loss(Tensor(np.full((2, 2, 2), 0.5)), one_hot(np.zeros((3, 2), dtype=int)))


def test_supervised_gradient_through_softmax():
    rng = np.random.default_rng(1)
    for _ in range(20):
        z = rng.normal(size=(2, 3, 3))
        labels = rng.integers(0, 2, size=(3, 3))
        zt = Tensor(z, requires_grad=True)
        supervised_loss(softmax_channels(zt), one_hot(labels)).backward()
        num = numeric_grad(lambda: supervised_ce(probs_from(z), labels), z)
        assert rel_error(zt.grad, num) < 1e-4


# -- pseudo-labels --------------------------------------------------------------


def test_pseudolabel_examples():
    pl = make_pseudolabel(np.array([0.9, 0.1]).reshape(2, 1, 1))
    assert pl.hard.item() == 0 and pl.confidence.item() == 0.9 and pl.valid.item()
    tie = make_pseudolabel(np.full((2, 1, 1), 0.5))
    assert tie.hard.item() == 0 and not tie.valid.item()


def test_pseudolabel_valid_count_matches_enumeration():
    rng = np.random.default_rng(2)
    for threshold in (0.5, 0.6, 0.9):
        p = probs_from(rng.normal(size=(2, 4, 4)) * 2)
        pl = make_pseudolabel(p, threshold)
        count = sum(1 for i in range(4) for j in range(4) if max(p[0, i, j], p[1, i, j]) > threshold)
        assert int(pl.valid.sum()) == count
    assert make_pseudolabel(np.stack([np.full((3, 3), 0.8), np.full((3, 3), 0.2)])).valid_fraction == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pseudolabel_hard_is_logit_argmax(seed):
    z = np.random.default_rng(seed).normal(size=(2, 8, 8))
    pl = make_pseudolabel(softmax_channels(Tensor(z)))
    for i in range(8):
        for j in range(8):
            assert pl.hard[i, j] == (1 if z[1, i, j] > z[0, i, j] else 0)


# -- weak-feature mixing --------------------------------------------------------


def test_mix_weak_features():
    rng = np.random.default_rng(3)
    z1, z2, zb = (rng.normal(size=(2, 8, 8)) for _ in range(3))
    full = RectMask.full(8, 8)
    aa, ab = mix_weak_features(z1, z2, zb, full, full)
    np.testing.assert_array_equal(aa.data, z1)
    np.testing.assert_array_equal(ab.data, z2)
    aa, _ = mix_weak_features(z1, z1, zb, sample_rect_mask(0, 8, 8), full)
    np.testing.assert_array_equal(aa.data, z1)
    m1 = RectMask(1, 2, 3, 4, 8, 8)
    m2 = RectMask(0, 0, 2, 2, 8, 8)
    aa, ab = mix_weak_features(Tensor(z1, requires_grad=True), z2, zb, m1, m2)
    assert not aa.requires_grad
    for i in range(8):
        for j in range(8):
            in1 = 2 <= i < 6 and 1 <= j < 4
            in2 = i < 2 and j < 2
            np.testing.assert_array_equal(aa.data[:, i, j], (z1 if in1 else z2)[:, i, j])
            np.testing.assert_array_equal(ab.data[:, i, j], (z2 if in2 else zb)[:, i, j])
    with pytest.raises(DimensionError):
        mix_weak_features(z1, z2, zb[:, :7], full, full)


# -- weak-to-strong -------------------------------------------------------------


def test_w2s_no_valid_pixels_gives_zero_loss_and_gradient():
    z = Tensor(np.random.default_rng(4).normal(size=(2, 3, 3)), requires_grad=True)
    pl = make_pseudolabel(np.full((2, 3, 3), 0.5))
    loss = w2s_loss(softmax_channels(z), pl)
    loss.backward()
    assert loss.item() == 0.0
    np.testing.assert_array_equal(z.grad, np.zeros((2, 3, 3)))


def test_w2s_confident_correct_pixel_contributes_nothing():
    strong = np.zeros((2, 1, 1))
    strong[1] = 1.0
    pl = PseudoLabelMap(hard=np.array([[1]]), confidence=np.array([[0.9]]), valid=np.array([[True]]))
    assert w2s_loss(Tensor(strong), pl).item() == 0.0


def test_w2s_matches_enumeration_3x3():
    rng = np.random.default_rng(5)
    for tau in (None, 0.5, 0.7):
        strong = probs_from(rng.normal(size=(2, 3, 3)) * 2)
        weak = probs_from(rng.normal(size=(2, 3, 3)) * 2)
        got = w2s_loss(Tensor(strong), make_pseudolabel(weak, 0.5), tau=tau).item()
        assert abs(got - w2s_ce(strong, weak, 0.5, tau)) < 1e-12


def test_w2s_strong_confidence_switch():
    weak = np.stack([np.full((2, 2), 0.9), np.full((2, 2), 0.1)])
    strong = np.stack([np.full((2, 2), 0.6), np.full((2, 2), 0.4)])
    pl = make_pseudolabel(weak)
    assert w2s_loss(Tensor(strong), pl, tau=0.7, conf_source="weak").item() > 0
    assert w2s_loss(Tensor(strong), pl, tau=0.7, conf_source="strong").item() == 0.0
    with pytest.raises(ContractError):
        w2s_loss(Tensor(strong), pl, conf_source="teacher")
    with pytest.raises(DimensionError):
        w2s_loss(Tensor(strong[:, :1]), pl)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 0.98), st.floats(0.0, 0.01))
def test_w2s_monotone_in_pseudo_class_probability(p, bump):
    weak = np.stack([np.full((2, 2), 0.2), np.full((2, 2), 0.8)])
    pl = make_pseudolabel(weak)

    def loss_at(q):
        return w2s_loss(Tensor(np.stack([np.full((2, 2), 1 - q), np.full((2, 2), q)])), pl).item()

    assert loss_at(p + bump) <= loss_at(p)


# -- view consistency -----------------------------------------------------------


def test_vc_hand_value():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[1.0, 2.0], [3.0, 5.0]])
    za = (a - 2.5) / math.sqrt(1.25)
    zb = (b - 2.75) / math.sqrt(2.1875)
    expected = ((za - zb) ** 2).sum() / 4  # second channel identical on both sides
    zw, zs = np.stack([a, a]), np.stack([b, a])
    assert abs(view_consistency_loss(Tensor(zw), Tensor(zs)).item() - expected) < 1e-14
    assert abs(expected - 0.0345853) < 1e-6


def test_vc_matches_loop_oracle_and_trivial_cases():
    rng = np.random.default_rng(6)
    for _ in range(10):
        zw, zs = rng.normal(size=(2, 4, 4)), rng.normal(size=(2, 4, 4))
        assert abs(view_consistency_loss(Tensor(zw), Tensor(zs)).item() - view_consistency(zw, zs)) < 1e-10
    assert view_consistency_loss(Tensor(zw), Tensor(zw)).item() == 0.0
    assert view_consistency_loss(Tensor(zw), Tensor(3 * zw + 7)).item() < 1e-8
    const = np.full((2, 3, 3), 2.0)
    assert view_consistency_loss(Tensor(const), Tensor(const)).item() == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 20), st.floats(0.05, 20), st.floats(-50, 50), st.floats(-50, 50))
def test_vc_affine_invariance_either_argument(seed, a0, a1, b0, b1):
    rng = np.random.default_rng(seed)
    zw, zs = rng.normal(size=(2, 5, 5)), rng.normal(size=(2, 5, 5))
    scale = np.array([a0, a1])[:, None, None]
    shift = np.array([b0, b1])[:, None, None]
    base = view_consistency_loss(Tensor(zw), Tensor(zs)).item()
    assert abs(view_consistency_loss(Tensor(scale * zw + shift), Tensor(zs)).item() - base) < 1e-8
    assert abs(view_consistency_loss(Tensor(zw), Tensor(scale * zs + shift)).item() - base) < 1e-8


def test_vc_gradient_flows_only_into_strong():
    rng = np.random.default_rng(7)
    zw = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
    zs_data = rng.normal(size=(2, 3, 3))
    zs = Tensor(zs_data, requires_grad=True)
    view_consistency_loss(zw, zs).backward()
    assert zw.grad is None
    num = numeric_grad(lambda: view_consistency(zw.data, zs_data), zs_data)
    assert rel_error(zs.grad, num) < 1e-4


# -- total loss and threshold ---------------------------------------------------


def test_total_loss_arithmetic_and_limits():
    w = LossWeights(0.5, 0.5)
    assert total_loss(1.0, 2.0, 2.0, 4.0, 4.0, w) == 7.0
    assert total_loss(1.5, 0.0, 0.0, 0.0, 0.0, w) == 1.5
    assert total_loss(1.5, 3.0, 2.0, 9.0, 1.0, LossWeights(0.0, 0.0)) == 1.5
    with pytest.raises(ContractError):
        LossWeights(-0.1, 0.5)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 5), st.floats(0, 5), st.floats(0, 5))
def test_total_loss_linear_in_weights(l1, l2, k):
    terms = (0.7, 1.1, 0.4, 2.0, 0.3)
    base = total_loss(*terms, LossWeights(l1, l2))
    scaled_w2s = total_loss(*terms, LossWeights(l1 * k, l2))
    assert abs((scaled_w2s - terms[0] - l2 * 2.3) - k * (base - terms[0] - l2 * 2.3)) < 1e-9


def test_adaptive_threshold_recursion():
    state = AdaptiveThreshold(ema=0.5, ema_momentum=0.5)
    seen = []
    for m in (0.6, 0.8, 1.0):
        state = update_adaptive_threshold(state, np.full((4, 4), m))
        seen.append(state.ema)
    np.testing.assert_allclose(seen, [0.55, 0.675, 0.8375], rtol=0, atol=1e-15)
    assert abs(state.tau - 0.8375) < 1e-15


def test_adaptive_threshold_limits():
    frozen = AdaptiveThreshold(ema=0.6, ema_momentum=1.0)
    assert update_adaptive_threshold(frozen, np.ones(3)).tau == 0.6
    s = AdaptiveThreshold(ema=0.5, ema_momentum=0.9)
    for _ in range(500):
        s = update_adaptive_threshold(s, np.full(5, 0.999))
    assert s.tau == 0.99
    low = AdaptiveThreshold(ema=0.5, ema_momentum=0.9)
    for _ in range(500):
        low = update_adaptive_threshold(low, np.full(5, 0.3))
    assert low.tau == 0.5 and abs(low.ema - 0.3) < 1e-9
    defaults = AdaptiveThreshold()
    assert (defaults.ema, defaults.ema_momentum, defaults.tau_floor, defaults.tau_ceil) == (0.5, 0.999, 0.5, 0.99)
