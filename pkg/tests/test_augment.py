import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudmatch.augment import (
    AugConfig,
    GeomRecord,
    RectMask,
    apply_geom,
    gaussian_blur,
    gaussian_kernel,
    make_views,
    mix,
    sample_rect_mask,
    strong_augment,
    weak_augment,
)
from cloudmatch.errors import ContractError, DimensionError, InputError
from cloudmatch.tensor import Tensor

SMALL = AugConfig(patch_size=16)


def image(seed=0, h=24, w=20):
    return np.random.default_rng(seed).uniform(0, 255, size=(3, h, w))


# -- weak -----------------------------------------------------------------------


def test_weak_is_deterministic_and_patch_sized():
    x = image()
    v1, g1 = weak_augment(x, 7, SMALL)
    v2, g2 = weak_augment(x, 7, SMALL)
    assert v1.shape == (3, 16, 16)
    np.testing.assert_array_equal(v1, v2)
    assert g1 == g2


def test_identity_geometry_is_top_left_crop():
    x = image()
    cfg = AugConfig(patch_size=16, scale_range=(1.0, 1.0), flip_prob=0.0)
    geom = GeomRecord(scale=1.0, resized=(24, 20), crop=(0, 0), flip=False, patch=16)
    np.testing.assert_array_equal(apply_geom(x, geom), x[:, :16, :16])
    view, g = weak_augment(x, 3, cfg)
    y0, x0 = g.crop
    np.testing.assert_array_equal(view, x[:, y0 : y0 + 16, x0 : x0 + 16])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_weak_view_mean_within_source_range(seed):
    x = image(seed % 17)
    view, _ = weak_augment(x, seed, SMALL)
    for c in range(3):
        assert x[c].min() - 1e-9 <= view[c].mean() <= x[c].max() + 1e-9
        assert x[c].min() - 1e-9 <= view[c].min() and view[c].max() <= x[c].max() + 1e-9


def test_small_images_are_padded_not_rejected():
    view, _ = weak_augment(image(h=5, w=9), 1, AugConfig(patch_size=16, scale_range=(0.5, 0.5)))
    assert view.shape == (3, 16, 16)


def test_degenerate_image_is_an_input_error():
    with pytest.raises(InputError):
        weak_augment(np.zeros((3, 0, 5)), 0, SMALL)


def test_mask_geometry_replays_with_nearest():
    mask = (np.random.default_rng(0).random((24, 20)) > 0.5).astype(np.uint8)
    _, geom = weak_augment(image(), 11, SMALL)
    out = apply_geom(mask, geom, nearest=True)
    assert out.shape == (16, 16) and set(np.unique(out)) <= {0, 1}


# -- strong ---------------------------------------------------------------------


def test_strong_with_zero_probabilities_is_identity():
    v = image(h=16, w=16)
    cfg = AugConfig(patch_size=16, jitter_prob=0.0, gray_prob=0.0, blur_prob=0.0)
    np.testing.assert_array_equal(strong_augment(v, 5, cfg), v)


def test_forced_grayscale_has_equal_channels():
    cfg = AugConfig(patch_size=16, jitter_prob=0.0, gray_prob=1.0, blur_prob=0.0)
    out = strong_augment(image(h=16, w=16), 5, cfg)
    np.testing.assert_array_equal(out[0], out[1])
    np.testing.assert_array_equal(out[1], out[2])


def test_blur_reduces_variance_on_noise():
    noise = np.random.default_rng(9).normal(128, 40, size=(3, 32, 32))
    blurred = gaussian_blur(noise, 2.0)
    assert np.all(blurred.var(axis=(1, 2)) < noise.var(axis=(1, 2)))
    k = gaussian_kernel(2.0)
    assert k.size == 2 * 6 + 1 and abs(k.sum() - 1.0) < 1e-15


def test_strong_stays_in_intensity_range_and_aligned():
    v = image(h=16, w=16)
    for seed in range(20):
        out = strong_augment(v, seed, SMALL)
        assert out.shape == v.shape
        assert out.min() >= 0.0 and out.max() <= 255.0


# -- masks ----------------------------------------------------------------------


def test_forced_full_mask():
    m = sample_rect_mask(0, 32, 32, area_range=(1.0, 1.0), aspect_range=(1.0, 1.0))
    assert (m.x0, m.y0, m.w, m.h) == (0, 0, 32, 32)
    assert m.as_grid.all()


def test_rect_mask_invariants_on_64x64():
    ss = np.random.SeedSequence(64)
    for child in ss.spawn(10_000):
        m = sample_rect_mask(child, 64, 64)
        assert 0 <= m.x0 and m.x0 + m.w <= 64 and 0 <= m.y0 and m.y0 + m.h <= 64
        assert 0.02 <= m.area_ratio <= 0.4
        assert 0.3 <= m.aspect <= 1 / 0.3


def test_rect_mask_needs_room():
    with pytest.raises(ContractError):
        sample_rect_mask(0, 7, 32)
    with pytest.raises(ContractError):
        RectMask(5, 0, 10, 4, 8, 12)


def test_rect_mask_position_covers_all_offsets():
    # fixed-size rectangles land at every admissible offset
    offsets = {sample_rect_mask(s, 8, 8, area_range=(0.25, 0.25), aspect_range=(1.0, 1.0)).x0 for s in range(400)}
    assert offsets == set(range(5))


# -- mixing ---------------------------------------------------------------------


def test_mix_identities():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 10, 12)), rng.normal(size=(3, 10, 12))
    full = RectMask.full(10, 12)
    np.testing.assert_array_equal(mix(a, b, full), a)
    np.testing.assert_array_equal(mix(a, a, sample_rect_mask(1, 10, 12)), a)
    empty = np.zeros((10, 12))
    np.testing.assert_array_equal(mix(a, b, empty), b)


def test_mix_edge_pixels():
    a = np.full((1, 8, 8), 1.0)
    b = np.full((1, 8, 8), 2.0)
    m = RectMask(x0=2, y0=3, w=3, h=2, height=8, width=8)
    out = mix(a, b, m)
    assert out[0, 3, 2] == 1.0 and out[0, 4, 4] == 1.0  # inside, on the edge
    assert out[0, 3, 1] == 2.0 and out[0, 5, 4] == 2.0 and out[0, 3, 5] == 2.0  # just outside


def test_mix_complement_reconstructs():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(2, 9, 9)), rng.normal(size=(2, 9, 9))
    m = sample_rect_mask(3, 9, 9)
    first, second = mix(a, b, m), mix(a, b, m.complement_grid())
    inside = m.as_grid.astype(bool)
    np.testing.assert_array_equal(first[:, inside], a[:, inside])
    np.testing.assert_array_equal(first[:, ~inside], b[:, ~inside])
    np.testing.assert_array_equal(second[:, inside], b[:, inside])
    np.testing.assert_array_equal(second[:, ~inside], a[:, ~inside])
    np.testing.assert_array_equal(mix(first, second, m), mix(a, a, m))


def test_mix_tensor_matches_array():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(2, 8, 8)), rng.normal(size=(2, 8, 8))
    m = sample_rect_mask(4, 8, 8)
    out = mix(Tensor(a), Tensor(b), m)
    assert isinstance(out, Tensor)
    np.testing.assert_array_equal(out.data, mix(a, b, m))


def test_mix_shape_errors():
    with pytest.raises(DimensionError):
        mix(np.zeros((3, 8, 8)), np.zeros((3, 8, 9)), RectMask.full(8, 8))
    with pytest.raises(DimensionError):
        mix(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)), RectMask.full(9, 8))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mix_is_pixelwise_selection(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 12, 12)), rng.normal(size=(3, 12, 12)) + 10
    out = mix(a, b, sample_rect_mask(seed, 12, 12))
    from_a = (out == a).all(axis=0)
    from_b = (out == b).all(axis=0)
    assert np.all(from_a ^ from_b)


# -- bundles --------------------------------------------------------------------


def test_bundle_is_deterministic_bytewise():
    xa, xb = image(1, 20, 20), image(2, 20, 20)
    b1, b2 = make_views(xa, xb, 42, SMALL), make_views(xa, xb, 42, SMALL)
    for name in b1.VIEW_NAMES:
        assert getattr(b1, name).tobytes() == getattr(b2, name).tobytes()
    assert (b1.m1, b1.m2, b1.apply_intra, b1.apply_inter) == (b2.m1, b2.m2, b2.apply_intra, b2.apply_inter)


def test_bundle_without_mixing_degenerates():
    cfg = AugConfig(patch_size=16, inter_mix_prob=0.0, intra_mix_prob=0.0)
    b = make_views(image(1), image(2), 0, cfg)
    np.testing.assert_array_equal(b.aa, b.s1a)
    np.testing.assert_array_equal(b.ab, b.s2a)
    assert not b.apply_intra and not b.apply_inter


def test_strong_views_share_parent_geometry():
    b = make_views(image(1), image(2), 3, SMALL)
    assert b.geoms["s1a"] == b.geoms["w1a"] and b.geoms["s2a"] == b.geoms["w2a"] and b.geoms["sb"] == b.geoms["wb"]
    # replaying the strong seed on the weak parent reproduces the strong view
    ss = np.random.SeedSequence(3).spawn(9)
    np.testing.assert_array_equal(strong_augment(b.w1a, ss[3], SMALL), b.s1a)


def test_mixing_frequencies_follow_probabilities():
    flags = [make_views(image(1, 16, 16), image(2, 16, 16), s, SMALL) for s in range(400)]
    intra = np.mean([f.apply_intra for f in flags])
    inter = np.mean([f.apply_inter for f in flags])
    assert abs(intra - 0.8) < 0.06 and abs(inter - 0.5) < 0.08
