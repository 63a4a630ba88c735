import logging

import numpy as np
import pytest
from pydantic import ValidationError

from src.domd_bench.errors import DomainError, InputValidationError
from src.domd_bench.geometry import DepthMap, ImageBuffer
from src.domd_bench.losses import (
    LossWeights,
    PhotometricParams,
    SourceChoice,
    cycle_consistency,
    inconsistent_set,
    masked_photometric,
    min_reprojection_loss,
    occlusion_aware_loss,
    photometric_error,
    reprojection_loss,
    smoothness,
    ssim,
    total_loss,
)


def _image(rng, height=12, width=14):
    return ImageBuffer(rng.random((height, width, 3)))


def _brute_ssim(a, b, params):
    pad = params.ssim_window // 2
    pa = np.pad(a, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
    pb = np.pad(b, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
    out = np.zeros_like(a)
    size = params.ssim_window
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            wa = pa[i : i + size, j : j + size]
            wb = pb[i : i + size, j : j + size]
            mu_a, mu_b = wa.mean(axis=(0, 1)), wb.mean(axis=(0, 1))
            var_a = (wa * wa).mean(axis=(0, 1)) - mu_a**2
            var_b = (wb * wb).mean(axis=(0, 1)) - mu_b**2
            cov = (wa * wb).mean(axis=(0, 1)) - mu_a * mu_b
            out[i, j] = ((2 * mu_a * mu_b + params.ssim_c1) * (2 * cov + params.ssim_c2)) / (
                (mu_a**2 + mu_b**2 + params.ssim_c1) * (var_a + var_b + params.ssim_c2)
            )
    return out


def test_identical_images_have_zero_error(rng):
    image = _image(rng)
    assert np.all(photometric_error(image, image) == 0.0)


def test_pure_l1_error():
    a = ImageBuffer.constant(6, 6, 0.5)
    b = ImageBuffer.constant(6, 6, 0.7)
    error = photometric_error(a, b, PhotometricParams(gamma=0.0))
    assert np.allclose(error, 0.2)


def test_ssim_matches_brute_force(rng):
    a, b = _image(rng, 7, 9).data, _image(rng, 7, 9).data
    params = PhotometricParams()
    assert np.allclose(ssim(a, b, params), _brute_ssim(a, b, params), atol=1e-10)
    wide = PhotometricParams(ssim_window=5)
    assert np.allclose(ssim(a, b, wide), _brute_ssim(a, b, wide), atol=1e-10)


def test_photometric_error_is_bounded(rng):
    error = photometric_error(_image(rng), _image(rng))
    assert np.all(error >= 0.0) and np.all(error <= 1.0)


@pytest.mark.parametrize("kwargs", [{"ssim_window": 4}, {"ssim_window": 1}, {"gamma": 1.5}])
def test_photometric_params_validation(kwargs):
    with pytest.raises(ValidationError):
        PhotometricParams(**kwargs)


def test_photometric_shape_mismatch(rng):
    with pytest.raises(InputValidationError):
        photometric_error(_image(rng, 4, 4), _image(rng, 4, 5))


def test_masked_photometric_zeroes_masked_pixels(rng):
    a, b = _image(rng), _image(rng)
    mask = np.zeros(a.shape, bool)
    mask[3:5, 4:7] = True
    error = masked_photometric(a, b, mask)
    assert np.all(error[mask] == 0.0)
    # pixels whose SSIM window misses the mask are unaffected
    far = np.ones(a.shape, bool)
    far[2:6, 3:8] = False
    assert np.allclose(error[far], photometric_error(a, b)[far], atol=1e-12)


def test_masked_photometric_without_mask_is_plain_error(rng):
    a, b = _image(rng), _image(rng)
    assert np.array_equal(
        masked_photometric(a, b, np.zeros(a.shape, bool)), photometric_error(a, b)
    )


def test_reprojection_losses():
    e_prev = np.array([[0.2, 0.6]])
    e_next = np.array([[0.4, 0.2]])
    assert reprojection_loss(e_prev, e_next) == pytest.approx(0.35)
    assert min_reprojection_loss(e_prev, e_next) == pytest.approx(0.2)


def test_occlusion_aware_equals_min_when_nothing_is_occluded(rng):
    e_prev, e_next = rng.random((8, 9)), rng.random((8, 9))
    none = np.zeros((8, 9), bool)
    result = occlusion_aware_loss(e_prev, e_next, none, ~none, none, ~none)
    assert result.loss == pytest.approx(min_reprojection_loss(e_prev, e_next), rel=1e-12)
    assert np.all(result.source_choice == SourceChoice.MIN)
    assert result.support == 72


def test_single_visible_source_is_used_even_when_worse():
    e_prev = np.array([[0.4, 0.1, 0.3]])
    e_next = np.array([[0.1, 0.1, 0.9]])
    o_prev = np.array([[False, True, True]])
    o_next = np.array([[True, False, True]])
    result = occlusion_aware_loss(e_prev, e_next, o_prev, ~o_prev, o_next, ~o_next)
    assert result.e_or_map.tolist() == [[0.4, 0.1, 0.0]]
    assert result.source_choice.tolist() == [
        [SourceChoice.PREV, SourceChoice.NEXT, SourceChoice.NONE]
    ]
    # the doubly occluded pixel is left out of the mean
    assert result.support == 2
    assert result.loss == pytest.approx(0.25)


def test_fully_occluded_frame_gives_zero_loss(caplog):
    everything = np.ones((3, 3), bool)
    with caplog.at_level(logging.WARNING):
        result = occlusion_aware_loss(
            np.ones((3, 3)), np.ones((3, 3)), everything, ~everything, everything, ~everything
        )
    assert result.loss == 0.0
    assert result.support == 0
    assert "occluded in both" in caplog.text


def test_occlusion_masks_must_partition():
    mask = np.zeros((2, 2), bool)
    with pytest.raises(InputValidationError):
        occlusion_aware_loss(np.ones((2, 2)), np.ones((2, 2)), mask, mask, mask, ~mask)


def test_occlusion_aware_matches_per_pixel_rule(rng):
    for _ in range(100):
        shape = tuple(rng.integers(1, 6, size=2))
        e_prev, e_next = rng.random(shape), rng.random(shape)
        o_prev, o_next = rng.random(shape) < 0.3, rng.random(shape) < 0.3
        result = occlusion_aware_loss(e_prev, e_next, o_prev, ~o_prev, o_next, ~o_next)
        total, support = 0.0, 0
        for index in np.ndindex(shape):
            if o_prev[index] and o_next[index]:
                continue
            support += 1
            if o_prev[index]:
                total += e_next[index]
            elif o_next[index]:
                total += e_prev[index]
            else:
                total += min(e_prev[index], e_next[index])
        assert result.support == support
        assert result.loss == pytest.approx(total / support if support else 0.0, abs=1e-12)


def _depth(values):
    values = np.asarray(values, dtype=float)
    return DepthMap(values, np.ones(values.shape, bool))


def test_cycle_consistency_cases():
    s = np.array([[True, True, False]])
    assert cycle_consistency(_depth([[3.0, 3.0, 9.0]]), _depth([[1.0, 1.0, 1.0]]), s) == 2.0
    assert cycle_consistency(_depth([[1.9, 1.0, 9.0]]), _depth([[1.0, 1.0, 1.0]]), s) == 0.0
    # the threshold is strict
    assert cycle_consistency(_depth([[2.0, 1.0, 1.0]]), _depth([[1.0, 1.0, 1.0]]), s) == 0.0
    above = cycle_consistency(_depth([[2.0 + 1e-6, 1.0, 1.0]]), _depth([[1.0, 1.0, 1.0]]), s)
    assert above == pytest.approx(1.0 + 1e-6)


def test_cycle_consistency_is_symmetric_in_relative_gap():
    s = np.ones((1, 1), bool)
    assert cycle_consistency(_depth([[1.0]]), _depth([[3.0]]), s) == 2.0
    assert inconsistent_set(np.array([1.0]), np.array([3.0])).tolist() == [True]


def test_cycle_consistency_empty_mask_is_zero():
    assert cycle_consistency(_depth([[1.0]]), _depth([[50.0]]), np.zeros((1, 1), bool)) == 0.0


def test_cycle_consistency_domain():
    invalid = DepthMap(np.array([[0.0, 1.0]]), np.array([[False, True]]))
    with pytest.raises(DomainError):
        cycle_consistency(invalid, _depth([[1.0, 1.0]]), np.array([[True, False]]))
    with pytest.raises(DomainError):
        inconsistent_set(np.array([0.0]), np.array([1.0]))


def test_smoothness_of_constant_depth_is_zero(rng):
    assert smoothness(_depth(np.full((6, 7), 4.0)), _image(rng, 6, 7)) == 0.0


def test_smoothness_is_scale_invariant(rng):
    depth = rng.uniform(1.0, 10.0, size=(6, 7))
    image = _image(rng, 6, 7)
    assert smoothness(_depth(depth), image) == pytest.approx(
        smoothness(_depth(3.0 * depth), image), rel=1e-12
    )


def test_smoothness_matches_brute_force(rng):
    depth = rng.uniform(1.0, 10.0, size=(5, 6))
    valid = rng.random((5, 6)) > 0.2
    image = _image(rng, 5, 6)
    inverse = np.where(valid, 1.0 / depth, 0.0)
    normalized = inverse / inverse[valid].mean()
    terms = []
    for i in range(4):
        for j in range(5):
            if not (valid[i, j] and valid[i, j + 1] and valid[i + 1, j]):
                continue
            gx = np.abs(image.data[i, j + 1] - image.data[i, j]).mean()
            gy = np.abs(image.data[i + 1, j] - image.data[i, j]).mean()
            terms.append(
                abs(normalized[i, j + 1] - normalized[i, j]) * np.exp(-gx)
                + abs(normalized[i + 1, j] - normalized[i, j]) * np.exp(-gy)
            )
    got = smoothness(DepthMap(np.where(valid, depth, 0.0), valid), image)
    assert got == pytest.approx(np.mean(terms) if terms else 0.0, rel=1e-12)


def test_smoothness_shape_mismatch(rng):
    with pytest.raises(InputValidationError):
        smoothness(_depth(np.ones((4, 4))), _image(rng, 4, 5))


def test_total_loss_sums_weighted_terms():
    report = total_loss(0.1, 0.2, 0.3)
    assert report.l_total == pytest.approx(0.6)
    assert report.l_total == report.l_c + report.l_or + report.l_s
    weighted = total_loss(0.1, 0.2, 0.3, LossWeights(cycle=0.0, smoothness=2.0))
    assert weighted.as_dict() == pytest.approx(
        {"l_c": 0.0, "l_or": 0.2, "l_s": 0.6, "l_total": 0.8}
    )


def test_total_loss_rejects_non_finite_terms():
    with pytest.raises(DomainError):
        total_loss(np.nan, 0.0, 0.0)
