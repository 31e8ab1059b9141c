"""Tests for the MEF-SSIM metric, its loss gradient and plain SSIM."""

import logging

import numpy as np
import pytest

from utils.errors import ConfigurationError, NumericError
from utils.gradcore import finite_diff_check
from utils.mefssim import (
    MefSsimConfig,
    decompose_patch,
    desired_patch,
    mef_ssim,
    mef_ssim_loss_grad,
    score_at,
    ssim,
    ssim_with_grad,
)


@pytest.fixture
def planes(rng):
    """Two textured exposures and an unrelated fused plane, 32x32."""
    texture = rng.uniform(0.0, 1.0, size=(32, 32))
    under = 0.4 * texture
    over = np.clip(0.3 + 0.9 * texture, 0.0, 1.0)
    fused = rng.uniform(0.0, 1.0, size=(32, 32))
    return under, over, fused


# =============================================================================
# Patch-level operations
# =============================================================================

class TestPatchOperations:

    def test_decompose_known_patch(self):
        d = decompose_patch([1, 2, 3, 4])
        assert d.luminance == pytest.approx(2.5)
        assert d.contrast == pytest.approx(np.sqrt(5.0))
        np.testing.assert_allclose(d.structure, np.array([-1.5, -0.5, 0.5, 1.5]) / np.sqrt(5.0))
        assert not d.degenerate

    def test_constant_patch_is_degenerate(self):
        d = decompose_patch([5, 5, 5])
        assert d.degenerate
        assert d.contrast == 0.0
        assert d.luminance == 5.0

    def test_reconstruction_round_trip(self, rng):
        for _ in range(20):
            patch = rng.uniform(0, 1, size=64)
            d = decompose_patch(patch)
            np.testing.assert_allclose(d.reconstruct(), patch, atol=1e-6)
            assert np.linalg.norm(d.structure) == pytest.approx(1.0, abs=1e-6)

    def test_empty_patch_rejected(self):
        with pytest.raises(ConfigurationError):
            decompose_patch([])

    def test_identical_patches_give_centred_patch(self, rng):
        y = rng.uniform(0, 1, size=16)
        d = desired_patch([y, y])
        np.testing.assert_allclose(d.values, y - y.mean(), atol=1e-12)

    def test_flat_patch_gets_no_weight(self, rng):
        y2 = rng.uniform(0, 1, size=16)
        d = desired_patch([np.full(16, 0.3), y2])
        np.testing.assert_allclose(d.values, y2 - y2.mean(), atol=1e-12)

    def test_hand_evaluated_pair(self):
        d = desired_patch([[0, 2], [0, 4]], p=1.0)
        np.testing.assert_allclose(d.values, [-2.0, 2.0], atol=1e-12)
        assert np.linalg.norm(d.values) == pytest.approx(d.contrast, abs=1e-6)
        assert d.contrast == pytest.approx(2.0 * np.sqrt(2.0))

    def test_both_flat_is_degenerate_and_scores_one(self):
        d = desired_patch([[1, 1, 1], [2, 2, 2]])
        assert d.degenerate
        np.testing.assert_array_equal(d.values, 0.0)
        assert score_at(d, [0.1, 0.5, 0.9]) == 1.0

    def test_score_of_shifted_copy_is_one(self, rng):
        y = rng.uniform(0, 1, size=64)
        d = desired_patch([y, y])
        assert score_at(d, y + 0.25) == pytest.approx(1.0, abs=1e-12)

    def test_anticorrelated_score_tends_to_minus_one(self, rng):
        target = rng.standard_normal(64)
        assert score_at(target, -target, c=1e-12) == pytest.approx(-1.0, abs=1e-9)

    def test_flat_vectors_score_one(self):
        assert score_at([0.2, 0.2], [0.7, 0.7]) == pytest.approx(1.0)

    def test_opposing_structures_cancel_to_zero(self, rng):
        y = rng.uniform(0.2, 0.8, size=16)
        fused = rng.uniform(0, 1, size=16)
        d = desired_patch([y, 1.0 - y])
        swapped = desired_patch([1.0 - y, y])
        np.testing.assert_array_equal(d.values, 0.0)
        np.testing.assert_array_equal(swapped.values, 0.0)
        c = 0.03 ** 2
        expected = c / (np.var(fused) + c)
        assert score_at(d, fused, c) == pytest.approx(expected, rel=1e-9)
        assert score_at(swapped, fused, c) == score_at(d, fused, c)


# =============================================================================
# Image-level metric
# =============================================================================

class TestMefSsim:

    def test_identical_images_score_one(self, planes):
        y = planes[0]
        result = mef_ssim([y, y], y)
        assert result.score == pytest.approx(1.0, abs=1e-12)
        assert result.scales == 3

    def test_flat_fusion_scores_below_either_input(self, planes):
        under, over, _ = planes
        flat = mef_ssim([under, over], np.full_like(under, 0.5)).score
        assert flat < mef_ssim([under, over], under).score
        assert flat < mef_ssim([under, over], over).score

    def test_scores_and_map_are_bounded(self, planes):
        under, over, fused = planes
        result = mef_ssim([under, over], fused)
        assert -1.0 <= result.score <= 1.0
        assert result.score_map.min() >= -1.0 and result.score_map.max() <= 1.0
        assert result.score_map.shape == under.shape

    def test_map_mean_equals_score_at_unit_stride(self, planes):
        under, over, fused = planes
        result = mef_ssim([under, over], fused)
        assert result.score_map.mean() == pytest.approx(result.score, abs=1e-12)

    def test_strided_map_keeps_image_size(self, planes):
        under, over, fused = planes
        result = mef_ssim([under, over], fused, MefSsimConfig(stride=4))
        assert result.score_map.shape == under.shape

    def test_input_swap_is_exactly_symmetric(self, planes):
        under, over, fused = planes
        cfg = MefSsimConfig(luminance=True)
        assert mef_ssim([under, over], fused, cfg).score == mef_ssim([over, under], fused, cfg).score

    @pytest.mark.parametrize("luminance", [False, True])
    def test_input_swap_on_an_inverse_pair(self, rng, luminance):
        under = rng.uniform(0.2, 0.8, size=(32, 32))
        over = 1.0 - under
        fused = rng.uniform(0, 1, size=(32, 32))
        cfg = MefSsimConfig(scales=1, luminance=luminance)
        forward_order = mef_ssim([under, over], fused, cfg)
        reverse_order = mef_ssim([over, under], fused, cfg)
        assert forward_order.score == reverse_order.score
        np.testing.assert_array_equal(forward_order.score_map, reverse_order.score_map)

    def test_inverse_pair_loss_gradient_is_order_free(self, rng):
        under = rng.uniform(0.2, 0.8, size=(24, 24))
        fused = rng.uniform(0, 1, size=(24, 24))
        cfg = MefSsimConfig(scales=2)
        loss_a, grad_a = mef_ssim_loss_grad([under, 1.0 - under], fused, cfg)
        loss_b, grad_b = mef_ssim_loss_grad([1.0 - under, under], fused, cfg)
        assert loss_a == loss_b
        np.testing.assert_array_equal(grad_a, grad_b)

    def test_desired_mosaic_is_optimal_with_tiled_windows(self, planes):
        under, over, _ = planes
        cfg = MefSsimConfig(window=8, stride=8, scales=1)
        mosaic = np.zeros_like(under)
        for y in range(0, 32, 8):
            for x in range(0, 32, 8):
                block = (slice(y, y + 8), slice(x, x + 8))
                d = desired_patch([under[block].ravel(), over[block].ravel()], p=cfg.structure_exponent)
                mosaic[block] = d.values.reshape(8, 8) + 0.5
        assert mef_ssim([under, over], mosaic, cfg).score == pytest.approx(1.0, abs=1e-9)

    def test_single_scale_ignores_brightness_shift(self, planes):
        under, over, fused = planes
        cfg = MefSsimConfig(window=8, stride=8, scales=1)
        base = mef_ssim([under, over], fused, cfg).score
        assert mef_ssim([under, over], fused + 0.1, cfg).score == pytest.approx(base, abs=1e-9)

    def test_luminance_term_penalises_dark_output(self, planes):
        under, over, _ = planes
        cfg = MefSsimConfig(luminance=True)
        mid = mef_ssim([under, over], 0.5 * (under + over), cfg).score
        dark = mef_ssim([under, over], 0.1 * (under + over), cfg).score
        assert dark < mid

    def test_scale_count_reduced_for_small_images(self, rng, caplog):
        y = rng.uniform(0, 1, size=(16, 16))
        with caplog.at_level(logging.WARNING, logger="utils.mefssim"):
            result = mef_ssim([y, y], y, MefSsimConfig(scales=3))
        assert result.scales == 2
        assert len(result.scale_scores) == 2
        assert "using 2" in caplog.text

    def test_scale_reduction_warned_on_every_call(self, rng, caplog):
        y = rng.uniform(0, 1, size=(16, 16))
        with caplog.at_level(logging.WARNING, logger="utils.mefssim"):
            for _ in range(3):
                mef_ssim([y, y], y, MefSsimConfig(scales=3))
        assert sum("using 2" in r.getMessage() for r in caplog.records) == 3

    def test_size_mismatch_rejected(self, rng):
        with pytest.raises(ConfigurationError):
            mef_ssim([np.zeros((16, 16)), np.zeros((16, 16))], np.zeros((16, 17)))

    def test_non_finite_fused_names_window(self, planes):
        under, over, fused = planes
        fused = fused.copy()
        fused[5, 7] = np.nan
        with pytest.raises(NumericError) as info:
            mef_ssim([under, over], fused)
        assert "window centre" in str(info.value)
        assert info.value.context["scale"] == 0

    def test_invalid_config_rejected(self):
        with pytest.raises(ConfigurationError):
            MefSsimConfig(window=1)
        with pytest.raises(ConfigurationError):
            MefSsimConfig(c=0.0)


# =============================================================================
# Loss and gradient
# =============================================================================

class TestLossGradient:

    def test_perfect_fusion_has_zero_loss_and_gradient(self, planes):
        y = planes[0]
        loss, grad = mef_ssim_loss_grad([y, y], y)
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert np.abs(grad).max() < 1e-9

    def test_loss_in_range(self, planes):
        under, over, fused = planes
        loss, grad = mef_ssim_loss_grad([under, over], fused)
        assert 0.0 <= loss <= 2.0
        assert grad.shape == fused.shape

    def test_loss_matches_metric(self, planes):
        under, over, fused = planes
        loss, _ = mef_ssim_loss_grad([under, over], fused)
        assert loss == pytest.approx(1.0 - mef_ssim([under, over], fused).score, abs=1e-12)

    @pytest.mark.parametrize(
        "cfg",
        [
            MefSsimConfig(),
            MefSsimConfig(luminance=True),
            MefSsimConfig(stride=3, scales=1),
            MefSsimConfig(window=5, structure_exponent=1.0),
        ],
        ids=["default", "luminance", "strided", "small-window"],
    )
    def test_gradient_matches_finite_differences(self, rng, cfg):
        under = rng.uniform(0.0, 0.5, size=(16, 16))
        over = rng.uniform(0.3, 1.0, size=(16, 16))

        def loss_fn(p):
            loss, grad = mef_ssim_loss_grad([under, over], p["fused"], cfg)
            return loss, {"fused": grad}

        params = {"fused": rng.uniform(0.0, 1.0, size=(16, 16))}
        assert finite_diff_check(loss_fn, params, eps=1e-4, min_magnitude=1e-6) < 1e-4


# =============================================================================
# Plain SSIM
# =============================================================================

class TestSsim:

    def test_identical_images(self, rng):
        a = rng.uniform(0, 1, size=(20, 20))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_brightness_offset_lowers_score(self, rng):
        b = rng.uniform(0, 0.8, size=(20, 20))
        assert ssim(b + 0.1, b) < 1.0

    def test_too_small_for_window(self):
        with pytest.raises(ConfigurationError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_gradient_matches_finite_differences(self, rng):
        b = rng.uniform(0, 1, size=(16, 16))

        def loss_fn(p):
            value, grad = ssim_with_grad(p["a"], b)
            return value, {"a": grad}

        params = {"a": rng.uniform(0, 1, size=(16, 16))}
        assert finite_diff_check(loss_fn, params, eps=1e-5, min_magnitude=1e-6) < 1e-4
