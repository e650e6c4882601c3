import numpy as np
import pytest

from aquafuse import fusion, imaging
from aquafuse.fusion import (
    FusionConfig,
    FusionInputs,
    contrast_enhance,
    fuse,
    fusion_enhance,
    normalize_weights,
    weight_maps,
    white_balance,
)


def channel_mean_gap(img):
    m = img.reshape(-1, 3).mean(axis=0)
    return m.max() - m.min()


class TestWhiteBalance:
    def test_balanced_image_fixed_point(self, rng):
        img = rng.uniform(0.2, 0.8, (24, 24, 3))
        img = img - img.reshape(-1, 3).mean(axis=0) + 0.5  # equalize channel means
        img = np.clip(img, 0, 1)
        out = white_balance(img)
        assert np.abs(out - img).max() <= 2e-2  # only clamping may nudge values

    def test_green_cast_gains_red(self, rng):
        img = rng.uniform(0.2, 0.8, (24, 24, 3))
        img[..., 0] *= 0.05  # kill red
        out = white_balance(img)
        bright_green = img[..., 1] > 0.5
        assert np.all(out[..., 0][bright_green] > img[..., 0][bright_green])

    def test_gray_world_property(self, rng):
        for trial in range(5):
            cast = rng.uniform(0.3, 1.0, 3)
            img = rng.uniform(0.2, 0.7, (32, 32, 3)) * cast
            out = white_balance(img)
            assert channel_mean_gap(out) <= 1e-3

    def test_near_black_unchanged(self):
        img = np.full((8, 8, 3), 1e-5)
        np.testing.assert_array_equal(white_balance(img), img)


class TestContrastEnhance:
    def test_constant_unchanged(self):
        img = np.full((32, 32, 3), 0.5)
        np.testing.assert_allclose(contrast_enhance(img), img, atol=1e-12)

    def test_ramp_contrast_increases(self):
        ramp = np.tile(np.linspace(0.4, 0.6, 64)[None, :, None], (64, 1, 3))
        out = contrast_enhance(ramp)
        assert imaging.rgb_to_gray(out).std() > imaging.rgb_to_gray(ramp).std()

    def test_output_in_range(self, rng):
        out = contrast_enhance(rng.uniform(0, 1, (40, 40, 3)))
        assert out.min() >= 0.0 and out.max() <= 1.0

    @pytest.mark.parametrize("dist", ["uniform", "beta"])
    def test_histogram_clip_audit(self, dist):
        # equalized tiles must keep their luminance histogram under the clip
        # bound; meaningful for inputs whose mass can actually spread (a
        # degenerate spike stays a spike, clipping prevents spreading)
        rng = np.random.default_rng(5)
        if dist == "uniform":
            plane = rng.uniform(0.05, 0.95, (64, 64))
        else:
            plane = rng.beta(3, 3, (64, 64))
        img = plane[..., None] * np.ones(3)
        cfg = FusionConfig(clahe_tiles=4, clahe_clip=2.0, clahe_bins=256)
        lum = np.clip(imaging.rgb_to_lab(contrast_enhance(img, cfg))[..., 0] / 100.0, 0, 1)
        tile = 64 // cfg.clahe_tiles
        audit_bins = 8
        for ti in range(cfg.clahe_tiles):
            for tj in range(cfg.clahe_tiles):
                patch = lum[ti * tile:(ti + 1) * tile, tj * tile:(tj + 1) * tile]
                hist, _ = np.histogram(patch, bins=audit_bins, range=(0.0, 1.0))
                uniform = patch.size / audit_bins
                assert hist.max() <= cfg.clahe_clip * uniform


class TestWeightMaps:
    def test_mid_gray(self):
        maps = weight_maps(np.full((16, 16, 3), 0.5))
        np.testing.assert_allclose(maps["exposedness"], 1.0, atol=1e-12)
        np.testing.assert_allclose(maps["laplacian_contrast"], 0.0, atol=1e-12)
        np.testing.assert_allclose(maps["saliency"], 0.0, atol=1e-12)
        np.testing.assert_allclose(maps["saturation"], 0.0, atol=1e-12)

    def test_saturated_red_region(self):
        img = np.full((16, 16, 3), 0.5)
        img[4:8, 4:8] = [0.95, 0.05, 0.05]
        sat = weight_maps(img)["saturation"]
        assert sat[5, 5] > 0.8
        assert sat[12, 12] < 0.05

    def test_scalar_loop_oracle(self, rng):
        img = rng.uniform(0, 1, (10, 10, 3))
        maps = weight_maps(img)
        lum = imaging.rgb_to_gray(img)
        lap_kernel = fusion.LAPLACIAN_KERNEL
        padded = np.pad(lum, 1, mode="reflect")
        for i in range(10):
            for j in range(10):
                acc = 0.0
                for dy in range(3):
                    for dx in range(3):
                        acc += lap_kernel[dy, dx] * padded[i + dy, j + dx]
                assert abs(maps["laplacian_contrast"][i, j] - min(abs(acc) / 4.0, 1.0)) < 1e-6
                mu = img[i, j].mean()
                sat = np.sqrt(((img[i, j] - mu) ** 2).mean()) / fusion._MAX_RGB_STD
                assert abs(maps["saturation"][i, j] - min(sat, 1.0)) < 1e-6
                expo = np.exp(-((lum[i, j] - 0.5) ** 2) / (2 * 0.25 ** 2))
                assert abs(maps["exposedness"][i, j] - expo) < 1e-6

    def test_all_maps_in_unit_range(self, rng):
        maps = weight_maps(rng.uniform(0, 1, (20, 20, 3)))
        for name, plane in maps.items():
            assert plane.min() >= 0.0 and plane.max() <= 1.0, name


class TestFuse:
    def test_identical_inputs_identity(self, rng):
        img = rng.uniform(0, 1, (40, 40, 3))
        w = normalize_weights([rng.uniform(0, 1, (40, 40)), rng.uniform(0, 1, (40, 40))])
        out = fuse(FusionInputs(img, img, w), 5)
        assert np.abs(out - img).max() <= 1e-4

    def test_degenerate_weights_select_input1(self, rng):
        img1 = rng.uniform(0, 1, (40, 40, 3))
        img2 = rng.uniform(0, 1, (40, 40, 3))
        w = normalize_weights([np.ones((40, 40)), np.zeros((40, 40))])
        out = fuse(FusionInputs(img1, img2, w), 5)
        assert np.abs(out - img1).max() <= 1e-4

    def test_single_level_is_naive_blend(self, rng):
        img1 = rng.uniform(0, 1, (32, 32, 3))
        img2 = rng.uniform(0, 1, (32, 32, 3))
        w = normalize_weights([rng.uniform(0, 1, (32, 32)), rng.uniform(0, 1, (32, 32))])
        out = fuse(FusionInputs(img1, img2, w), 1)
        naive = w[0][..., None] * img1 + w[1][..., None] * img2
        np.testing.assert_allclose(out, np.clip(naive, 0, 1), atol=1e-6)

    def test_extent_mismatch(self, rng):
        img1 = rng.uniform(0, 1, (32, 32, 3))
        img2 = rng.uniform(0, 1, (16, 16, 3))
        w = (np.ones((32, 32)), np.zeros((32, 32)))
        with pytest.raises(ValueError):
            fuse(FusionInputs(img1, img2, w), 3)

    def test_level_coefficients_stay_in_hull(self, rng):
        # fused Laplacian coefficients lie between the inputs' coefficients
        img1 = rng.uniform(0, 1, (32, 32, 3))
        img2 = rng.uniform(0, 1, (32, 32, 3))
        w = normalize_weights([rng.uniform(0, 1, (32, 32)), rng.uniform(0, 1, (32, 32))])
        lap1 = imaging.laplacian_pyramid(img1, 3)
        lap2 = imaging.laplacian_pyramid(img2, 3)
        wg = [imaging.gaussian_pyramid(np.asarray(wk), 3) for wk in w]
        for lvl in range(3):
            fused = wg[0][lvl][..., None] * lap1[lvl] + wg[1][lvl][..., None] * lap2[lvl]
            lo = np.minimum(lap1[lvl], lap2[lvl])
            hi = np.maximum(lap1[lvl], lap2[lvl])
            margin = 1e-3 * (np.abs(lo) + np.abs(hi) + 1)  # smoothed weights may not sum to 1 exactly off-grid
            assert np.all(fused >= lo - margin) and np.all(fused <= hi + margin)


class TestNormalizeWeights:
    def test_sum_to_one(self, rng):
        w = normalize_weights([rng.uniform(0, 1, (16, 16)) for _ in range(2)])
        np.testing.assert_allclose(w[0] + w[1], 1.0, atol=1e-6)

    def test_zero_weights_guarded(self):
        w = normalize_weights([np.zeros((8, 8)), np.zeros((8, 8))])
        np.testing.assert_allclose(w[0] + w[1], 1.0, atol=1e-9)


class TestFusionEnhance:
    def test_mid_gray_near_fixed_point(self):
        img = np.full((64, 64, 3), 0.5)
        out = fusion_enhance(img)
        assert np.abs(out - img).max() <= 0.02

    def test_green_cast_reduced(self, rng):
        base = np.clip(rng.uniform(0.25, 0.75, (48, 48, 3))
                       + 0.15 * np.sin(np.linspace(0, 6, 48))[None, :, None], 0.05, 0.95)
        cast = base * np.array([0.25, 0.95, 0.55])
        out = fusion_enhance(cast)
        assert channel_mean_gap(out) <= 0.5 * channel_mean_gap(cast)

    def test_repeat_application_does_not_recast(self, rng):
        cast = rng.uniform(0.2, 0.7, (48, 48, 3)) * np.array([0.4, 0.9, 0.6])
        once = fusion_enhance(cast)
        twice = fusion_enhance(once)
        assert channel_mean_gap(twice) <= channel_mean_gap(once) * 1.1 + 1e-6

    def test_deterministic(self, rng):
        img = rng.uniform(0, 1, (48, 48, 3))
        a = fusion_enhance(img)
        b = fusion_enhance(img.copy())
        assert a.tobytes() == b.tobytes()

    def test_output_range(self, rng):
        out = fusion_enhance(rng.uniform(0, 1, (32, 32, 3)))
        assert out.min() >= 0.0 and out.max() <= 1.0
