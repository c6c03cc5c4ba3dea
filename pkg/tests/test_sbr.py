"""SBR feature extraction and linear-SVM baseline tests."""

import numpy as np
import pytest

from spectpd import phantom, sbr
from spectpd.errors import ConfigError, ShapeError
from spectpd.filters import FWHM_PER_SIGMA, gaussian_kernel_1d
from spectpd.phantom import PhantomConfig, Volume, generate_phantom
from spectpd.sbr import (
    compute_sbr,
    default_roi_masks,
    gaussian_smooth_3d,
    hottest_slice_average,
    sigma_voxels,
    svm_objective,
    svm_predict,
    svm_train,
)

from test_phantom import nc_params, pd_params


class TestGaussianSmoothing:
    def test_sigma_conversion(self):
        assert abs(sigma_voxels(6.0, 2.0) - 1.2740) < 1e-3

    def test_constant_volume_unchanged(self):
        vol = Volume(np.full((10, 12, 10), 2.5, np.float32), (2.0, 2.0, 2.0))
        out = gaussian_smooth_3d(vol, 6.0)
        np.testing.assert_allclose(out.data, 2.5, rtol=1e-6)

    def test_impulse_response_is_sampled_kernel(self):
        vol = Volume(np.zeros((33, 33, 33), np.float64), (2.0, 2.0, 2.0))
        vol.data[16, 16, 16] = 1.0
        out = gaussian_smooth_3d(vol, 6.0)
        k = gaussian_kernel_1d(6.0 / FWHM_PER_SIGMA / 2.0)
        r = len(k) // 2
        assert 16 - r >= r  # impulse response clear of the edge-renorm zone
        expected = k[:, None, None] * k[None, :, None] * k[None, None, :]
        got = out.data[16 - r : 16 + r + 1, 16 - r : 16 + r + 1, 16 - r : 16 + r + 1]
        np.testing.assert_allclose(got, expected, rtol=1e-10, atol=1e-12)

    def test_total_intensity_preserved_interior(self):
        rng = np.random.default_rng(0)
        vol = np.zeros((24, 24, 24))
        vol[8:16, 8:16, 8:16] = rng.random((8, 8, 8))
        out = gaussian_smooth_3d(Volume(vol, (2.0, 2.0, 2.0)), 6.0)
        assert abs(out.data.sum() / vol.sum() - 1.0) < 1e-4


class TestHottestSliceAverage:
    def test_single_bright_slice_centers_window(self):
        vol = np.zeros((20, 6, 6))
        vol[11] = 1.0
        out = hottest_slice_average(vol)
        # window [8, 16) contains the bright slice
        np.testing.assert_allclose(out, 1.0 / 8)

    def test_constant_volume_tie_breaks_low(self):
        vol = np.full((12, 5, 5), 3.0)
        out = hottest_slice_average(vol)
        np.testing.assert_allclose(out, 3.0)

    def test_window_covers_generator_slices(self):
        vol, _ = generate_phantom(pd_params(seed=11, noise=0.05), "half")
        smoothed = gaussian_smooth_3d(vol, 6.0)
        data = smoothed.data
        sums = data.sum(axis=(1, 2))
        j = int(sums.argmax())
        lo, hi = vol.meta["striatal_slices"]
        assert lo <= j <= hi

    def test_too_few_slices_rejected(self):
        with pytest.raises(ShapeError, match="slices"):
            hottest_slice_average(np.zeros((5, 4, 4)))


class TestComputeSbr:
    def test_equal_densities_give_zero(self):
        masks = default_roi_masks("half")
        img = np.ones(masks.reference.shape)
        feats = compute_sbr(img, masks)
        assert feats.as_array() == pytest.approx(np.zeros(4))

    def test_double_density_gives_one(self):
        masks = default_roi_masks("half")
        img = np.ones(masks.reference.shape)
        for m in (masks.left_caudate, masks.right_caudate, masks.left_putamen, masks.right_putamen):
            img[m] = 2.0
        feats = compute_sbr(img, masks)
        assert feats.as_array() == pytest.approx(np.ones(4))

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        masks = default_roi_masks("half")
        img = rng.random(masks.reference.shape) + 0.5
        a = compute_sbr(img, masks).as_array()
        b = compute_sbr(3.7 * img, masks).as_array()
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_zero_reference_rejected(self):
        masks = default_roi_masks("half")
        with pytest.raises(ConfigError, match="reference"):
            compute_sbr(np.zeros(masks.reference.shape), masks)

    def test_phantom_ratio_matches_construction(self):
        # unblurred, noiseless phantom: region means are exactly the template values
        vol, _, pre = generate_phantom(
            nc_params(noise=0.0, blur=0.0), "half", return_prenorm=True
        )
        img = hottest_slice_average(pre)
        masks = default_roi_masks("half")
        feats = compute_sbr(img, masks)
        # pure target density would give gain/background - 1 = 3; slice averaging
        # mixes background into the projected ROI, so expect values in (0.5, 3].
        assert all(0.5 < v <= 3.0 + 1e-9 for v in feats.as_array())


def separable_cloud(n=40, seed=2):
    rng = np.random.default_rng(seed)
    x_neg = rng.normal(loc=(-2.0, 0.0), scale=0.5, size=(n // 2, 2))
    x_pos = rng.normal(loc=(2.0, 0.0), scale=0.5, size=(n // 2, 2))
    X = np.vstack([x_neg, x_pos])
    y = np.array([0] * (n // 2) + [1] * (n // 2))
    return X, y


class TestSvm:
    def test_two_point_separable(self):
        X = np.array([[0.0, 0.0], [1.0, 1.0]])
        y = np.array([0, 1])
        model = svm_train(X, y)
        preds, _ = svm_predict(model, X)
        np.testing.assert_array_equal(preds, y)

    def test_contradictory_points_irreducible(self):
        X = np.array([[1.0, 1.0]] * 4)
        y = np.array([0, 1, 0, 1])
        model = svm_train(X, y)
        preds, _ = svm_predict(model, X)
        assert (preds == y).mean() == 0.5
        assert np.isfinite(model.objective_history[-1])

    def test_objective_nonincreasing(self):
        X, y = separable_cloud()
        model = svm_train(X, y)
        h = model.objective_history
        assert all(a >= b - 1e-12 for a, b in zip(h, h[1:]))

    def test_single_class_rejected(self):
        with pytest.raises(ConfigError, match="both classes"):
            svm_train(np.zeros((4, 2)), np.zeros(4, dtype=int))

    def test_matches_grid_search_oracle(self):
        X, y = separable_cloud(n=30, seed=3)
        C = 1.0
        model = svm_train(X, y, C=C, epochs=4000)
        Xs = (X - model.feature_mean) / model.feature_std
        ys = np.where(y == 1, 1.0, -1.0)
        ours = svm_objective(model.w, model.b, Xs, ys, C)
        # brute-force grid over (w1, w2, b), refined once around the best cell
        best = np.inf
        center, width = np.zeros(3), 3.0
        for _ in range(3):
            grid = [np.linspace(c - width, c + width, 25) for c in center]
            for w1 in grid[0]:
                for w2 in grid[1]:
                    for b in grid[2]:
                        o = svm_objective(np.array([w1, w2]), b, Xs, ys, C)
                        if o < best:
                            best, center = o, np.array([w1, w2, b])
            width /= 6.0
        assert ours <= best * 1.01

    def test_phantom_cohort_pd_putamen_sbr_lower(self, tmp_path):
        cfg = PhantomConfig(cohort_size=24, grid="half", seed=21, noise_level=0.05)
        records = phantom.build_cohort(cfg, tmp_path, save_masks=False)
        masks = default_roi_masks("half")
        put_by_label = {"PD": [], "NC": []}
        for r in records:
            vol = phantom.load_volume(tmp_path / r.volume)
            smoothed = gaussian_smooth_3d(vol, 6.0)
            feats = compute_sbr(hottest_slice_average(smoothed), masks)
            put_by_label[r.label].append(min(feats.left_putamen, feats.right_putamen))
        assert np.mean(put_by_label["PD"]) < np.mean(put_by_label["NC"])
