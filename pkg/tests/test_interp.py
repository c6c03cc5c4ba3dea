"""Slice averaging, thresholds, top-k masks, Dice, MAE, mean heatmaps."""

import numpy as np
import pytest

from spectpd import interp, phantom
from spectpd.errors import ConfigError, ShapeError
from spectpd.interp import (
    BinaryMask2D,
    SliceImage,
    aggregate_dice,
    dice,
    mae_map,
    mean_segmented_heatmap,
    segment_ground_truth,
    slice_average,
    slice_window,
    topk_binarize,
)

from test_phantom import nc_params


def mask(arr):
    return BinaryMask2D(data=np.asarray(arr, dtype=bool))


class TestSliceWindow:
    def test_full_grid_window(self):
        assert slice_window(91) == (35, 48)
        assert 48 - 35 + 1 == 14

    def test_half_grid_scaled(self):
        lo, hi = slice_window(46)
        assert (lo, hi) == (18, 24)

    def test_degenerate_volume_rejected(self):
        with pytest.raises(ShapeError):
            slice_window(2)


class TestSliceAverage:
    def test_identical_slices_average_to_normalized_slice(self):
        rng = np.random.default_rng(0)
        sl = rng.random((12, 10))
        vol = np.broadcast_to(sl, (91, 12, 10)).copy()
        out = slice_average(vol)
        expected = (sl - sl.min()) / (sl.max() - sl.min())
        np.testing.assert_allclose(out.data, expected, rtol=1e-12)

    def test_window_recorded(self):
        vol = np.random.default_rng(1).random((91, 6, 6))
        out = slice_average(vol)
        assert out.provenance["window"] == [35, 48]
        assert out.provenance["n_slices"] == 14

    def test_output_hits_zero_and_one(self):
        vol = np.random.default_rng(2).random((91, 8, 8))
        out = slice_average(vol)
        assert out.data.min() == 0.0 and out.data.max() == 1.0

    def test_constant_slices_pass_as_zeros(self):
        vol = np.zeros((91, 5, 5))
        vol[40] = np.random.default_rng(3).random((5, 5))
        out = slice_average(vol)
        assert 35 in out.provenance["zero_range_slices"]
        assert len(out.provenance["zero_range_slices"]) == 13

    def test_affine_rescale_invariance(self):
        vol = np.random.default_rng(4).random((91, 7, 7))
        a = slice_average(vol)
        b = slice_average(3.5 * vol + 11.0)
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)


class TestGroundTruth:
    def test_uniform_above_both_thresholds(self):
        img = SliceImage(np.full((4, 4), 0.70))
        assert segment_ground_truth(img, "NC").data.all()
        assert segment_ground_truth(img, "PD").data.all()

    def test_uniform_between_thresholds(self):
        img = SliceImage(np.full((4, 4), 0.65))
        assert segment_ground_truth(img, "NC").data.all()
        assert not segment_ground_truth(img, "PD").data.any()

    def test_unknown_label_rejected(self):
        with pytest.raises(ConfigError):
            segment_ground_truth(SliceImage(np.zeros((2, 2))), "HC")

    def test_phantom_ground_truth_overlaps_generator_footprint(self):
        vol, gt_mask = phantom.generate_phantom(nc_params(noise=0.03, seed=31), "half")
        img = slice_average(vol.data)
        seg = segment_ground_truth(img, "NC")
        lo, hi = slice_window(vol.data.shape[0])
        footprint = gt_mask[lo : hi + 1].any(axis=0)
        d = dice(seg, BinaryMask2D(footprint))
        assert d >= 0.5


class TestTopK:
    def test_exact_count(self):
        img = np.random.default_rng(5).random((10, 10))
        m = topk_binarize(img, 10)
        assert m.data.sum() == 10

    def test_all_pixels_at_100(self):
        img = np.random.default_rng(6).random((7, 9))
        assert topk_binarize(img, 100).data.all()

    def test_ramp_selects_single_largest(self):
        img = np.arange(100, dtype=float).reshape(10, 10)
        m = topk_binarize(img, 1)
        assert m.data.sum() == 1
        assert m.data[9, 9]

    def test_ties_break_to_lowest_flat_index(self):
        img = np.zeros((4, 5))
        m = topk_binarize(img, 20)  # 4 pixels of 20
        idx = np.flatnonzero(m.data.reshape(-1))
        np.testing.assert_array_equal(idx, [0, 1, 2, 3])

    def test_masks_nest(self):
        img = np.random.default_rng(7).random((12, 12))
        m1 = topk_binarize(img, 5)
        m2 = topk_binarize(img, 25)
        assert (m1.data <= m2.data).all()

    def test_monotone_rescale_leaves_mask_unchanged(self):
        img = np.random.default_rng(8).random((9, 9))
        a = topk_binarize(img, 10).data
        b = topk_binarize(np.exp(4 * img), 10).data
        np.testing.assert_array_equal(a, b)

    def test_bad_k_rejected(self):
        with pytest.raises(ConfigError):
            topk_binarize(np.zeros((2, 2)), 0)


class TestDice:
    def test_identical_masks(self):
        m = mask(np.eye(4))
        assert dice(m, m) == 1.0

    def test_disjoint_masks(self):
        a = mask([[1, 0], [0, 0]])
        b = mask([[0, 0], [0, 1]])
        assert dice(a, b) == 0.0

    def test_half_overlap(self):
        a = np.zeros((4, 5), dtype=bool)
        b = np.zeros((4, 5), dtype=bool)
        a.reshape(-1)[:10] = True
        b.reshape(-1)[5:15] = True
        assert dice(mask(a), mask(b)) == 0.5

    def test_symmetric(self):
        rng = np.random.default_rng(9)
        a = mask(rng.random((6, 6)) > 0.5)
        b = mask(rng.random((6, 6)) > 0.5)
        assert dice(a, b) == dice(b, a)

    def test_both_empty_is_zero(self):
        assert dice(mask(np.zeros((3, 3))), mask(np.zeros((3, 3)))) == 0.0

    def test_extent_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            dice(mask(np.zeros((2, 2))), mask(np.zeros((3, 3))))

    def test_invariant_under_monotone_map_rescale(self):
        rng = np.random.default_rng(10)
        amap = rng.random((8, 8))
        gt = mask(rng.random((8, 8)) > 0.6)
        d1 = dice(topk_binarize(amap, 10), gt)
        d2 = dice(topk_binarize(2 * amap + 3, 10), gt)
        assert d1 == d2


class TestMaeMap:
    def test_perfect_prediction_zero_field(self):
        ms = [mask(np.eye(3))] * 4
        field, mean = mae_map(ms, ms)
        assert not field.any() and mean == 0.0

    def test_complement_gives_union_ones(self):
        g = np.zeros((3, 3), dtype=bool)
        g[0] = True
        p = ~g
        field, _ = mae_map([mask(p)], [mask(g)])
        np.testing.assert_array_equal(field, np.ones((3, 3)))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(11)
        preds = [mask(rng.random((5, 5)) > 0.5) for _ in range(6)]
        gts = [mask(rng.random((5, 5)) > 0.5) for _ in range(6)]
        field, mean = mae_map(preds, gts)
        expected = np.zeros((5, 5))
        for i in range(5):
            for j in range(5):
                expected[i, j] = np.mean(
                    [abs(float(p.data[i, j]) - float(g.data[i, j])) for p, g in zip(preds, gts)]
                )
        assert np.abs(field - expected).max() < 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            mae_map([], [])


class TestMeanHeatmap:
    def test_identical_masks_reproduce_mask(self):
        m = mask(np.eye(4))
        h = mean_segmented_heatmap([m, m, m])
        np.testing.assert_array_equal(h.data, m.data.astype(float))

    def test_complementary_masks_give_half(self):
        a = mask([[1, 0], [1, 0]])
        b = mask([[0, 1], [0, 1]])
        h = mean_segmented_heatmap([a, b])
        np.testing.assert_allclose(h.data, 0.5)

    def test_counting_oracle(self):
        rng = np.random.default_rng(12)
        ms = [mask(rng.random((4, 4)) > 0.5) for _ in range(7)]
        h = mean_segmented_heatmap(ms)
        counts = sum(m.data.astype(int) for m in ms)
        np.testing.assert_allclose(h.data, counts / 7)


class TestAggregate:
    def test_mean_sd_and_exclusions(self):
        recs = [
            interp.InterpRecord("s1", "pdnet", "saliency", 0, 1.0, 0.4),
            interp.InterpRecord("s2", "pdnet", "saliency", 0, 1.0, 0.6),
            interp.InterpRecord("s3", "pdnet", "saliency", 0, 1.0, 0.0, excluded=True, reason="empty gt"),
        ]
        agg = aggregate_dice(recs)
        entry = agg[("pdnet", "saliency", 1.0)]
        assert entry["n"] == 2
        assert entry["mean"] == pytest.approx(0.5)
        assert entry["sd"] == pytest.approx(np.std([0.4, 0.6], ddof=1))
