import numpy as np
import pytest

from sijgrade.augment import (AffineDraw, AugmentParams, apply_affine, augment_image, draw_affine,
                              elastic_deform, elastic_displacement)


def _blob(shape=(100, 200), r=18):
    rr, cc = np.mgrid[: shape[0], : shape[1]]
    return np.exp(-((rr - (shape[0] - 1) / 2) ** 2 + (cc - (shape[1] - 1) / 2) ** 2) / (2 * r * r))


def test_identity_ranges_give_input():
    img = np.random.default_rng(0).normal(size=(100, 200))
    out = augment_image(img, AugmentParams.identity(), np.random.default_rng(1))
    assert np.array_equal(out, img)


def test_shape_preserved():
    img = np.random.default_rng(0).normal(size=(100, 200))
    for aug in (AugmentParams.slice(), AugmentParams.roi()):
        assert augment_image(img, aug, np.random.default_rng(2)).shape == img.shape


def test_constant_image_stays_constant_inside_frame():
    # out-of-frame pixels are zero-filled, so a constant image is only preserved where
    # the inverse map lands inside the source frame
    img = np.full((100, 200), 7.0)
    ones = np.ones_like(img)
    rng = np.random.default_rng(3)
    for _ in range(20):
        d = draw_affine(AugmentParams.slice(), rng)
        out = apply_affine(img, d)
        cover = apply_affine(ones, d, order=0)
        inner = cover == 1
        assert inner.mean() > 0.6
        assert np.allclose(out[inner], 7.0, atol=1e-9)
        assert np.all(out[cover == 0] == 0)


def test_mass_scales_with_square_of_scale():
    # a centered blob far from the border keeps its mass up to the area factor s^2
    img = _blob()
    m0 = img.sum()
    rng = np.random.default_rng(4)
    for _ in range(100):
        d = draw_affine(AugmentParams.slice(), rng)
        ratio = apply_affine(img, d).sum() / m0
        assert abs(ratio - d.scale ** 2) < 0.02 * d.scale ** 2


def test_mass_change_bounded_for_narrow_scale():
    img = _blob()
    rng = np.random.default_rng(5)
    aug = AugmentParams.slice().with_(scale=(0.9, 1.1))
    for _ in range(100):
        assert abs(augment_image(img, aug, rng).sum() / img.sum() - 1) < 0.25


def test_pure_translation_moves_pixels():
    img = np.zeros((100, 200))
    img[50, 100] = 1.0
    out = apply_affine(img, AffineDraw(1.0, 0.0, 0.05, 0.0), order=0)
    assert out[50, 110] == 1.0 and out.sum() == 1.0


def test_rotation_direction_and_center():
    img = np.zeros((101, 101))
    img[50, 50] = 1.0
    out = apply_affine(img, AffineDraw(1.0, 37.0, 0.0, 0.0), order=1)
    assert out[50, 50] == pytest.approx(1.0)


def test_draws_within_ranges():
    aug = AugmentParams.slice()
    rng = np.random.default_rng(6)
    for _ in range(500):
        d = draw_affine(aug, rng)
        assert 0.85 <= d.scale <= 1.15 and -10 <= d.rotation_deg <= 10
        assert -0.1 <= d.shift_x <= 0.1 and 0 <= d.shift_y <= 0.01


def test_presets():
    assert AugmentParams.roi().rotation_deg == (-2.0, 2.0)
    assert AugmentParams.roi().height_shift == (-0.01, 0.01)
    assert AugmentParams.slice().rotation_deg == (-10.0, 10.0)
    assert AugmentParams.slice().height_shift == (0.0, 0.01)
    a = AugmentParams.roi()
    assert (a.elastic_sigma, a.elastic_alpha, a.elastic_amplitude) == (10.0, 5.0, 1.0)


@pytest.mark.parametrize("kw", [dict(scale=(1.2, 0.8)), dict(scale=(0.0, 1.0)),
                                dict(elastic=True, elastic_sigma=0.0)])
def test_invalid_params(kw):
    with pytest.raises(ValueError):
        AugmentParams(**kw)


def test_elastic_alpha_zero_is_identity():
    img = np.random.default_rng(0).normal(size=(100, 200))
    assert np.array_equal(elastic_deform(img, 10, 0, np.random.default_rng(1)), img)


def test_elastic_constant_image():
    img = np.full((100, 200), -3.5)
    out = elastic_deform(img, 10, 5, np.random.default_rng(2))
    assert out.shape == img.shape and np.allclose(out, -3.5)


def test_elastic_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        elastic_deform(np.zeros((10, 10)), 0.0, 5.0, np.random.default_rng(0))


def _laplacian_energy(f):
    lap = (f[1:-1, 2:] + f[1:-1, :-2] + f[2:, 1:-1] + f[:-2, 1:-1] - 4 * f[1:-1, 1:-1])
    return np.abs(lap).mean()


def test_smoothed_field_is_smoother():
    for s in range(10):
        rough = elastic_displacement((100, 200), 10, 1.0, np.random.default_rng(s), smooth=False)
        smooth = elastic_displacement((100, 200), 10, 1.0, np.random.default_rng(s), smooth=True)
        for a, b in zip(smooth, rough):
            assert _laplacian_energy(a) < _laplacian_energy(b)


def test_elastic_displacement_small_and_deterministic():
    a = elastic_displacement((64, 64), 10, 5, np.random.default_rng(9))
    b = elastic_displacement((64, 64), 10, 5, np.random.default_rng(9))
    assert np.array_equal(a, b)
    # smoothing a uniform[-1, 1] field with sigma 10 leaves sub-pixel amplitude before alpha
    assert np.abs(a).max() < 5.0
