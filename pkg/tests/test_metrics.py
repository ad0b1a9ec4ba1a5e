"""Metric oracles: hand-counted and brute-force expected values."""

import numpy as np
import pytest

from blurlab import metrics
from blurlab.dataset import generate_shapestex
from blurlab.errors import InvalidParameterError, ShapeError
from blurlab.imaging import degrade_eval
from blurlab.net import blurnet_s, build_model
from blurlab.psf import delta_kernel, disk_kernel


class TestTopK:
    def test_perfect_one_hot(self):
        preds = [np.eye(4)[i] for i in (0, 3, 1)]
        assert metrics.topk_accuracy(preds, [0, 3, 1], 1) == 1.0

    def test_uniform_all_classes(self):
        preds = [np.full(10, 0.1)] * 5
        assert metrics.topk_accuracy(preds, [0, 9, 4, 2, 7], 10) == 1.0

    def test_hand_enumerated_top2(self):
        # top-2 sets: {0,1} (hit for label 1) and {2,1} (miss for label 0)
        preds = [np.array([0.5, 0.3, 0.2]), np.array([0.1, 0.2, 0.7])]
        assert metrics.topk_accuracy(preds, [1, 0], 2) == 0.5

    def test_tie_breaks_toward_lower_index(self):
        tied = np.array([0.4, 0.4, 0.2])
        assert metrics.topk_hit(tied, 0, 1)
        assert not metrics.topk_hit(tied, 1, 1)
        assert metrics.topk_hit(tied, 1, 2)

    def test_monotone_in_k(self):
        rng = np.random.default_rng(3)
        preds = []
        for _ in range(40):
            p = rng.random(6)
            preds.append(p / p.sum())
        labels = rng.integers(0, 6, size=40)
        fractions = [metrics.topk_accuracy(preds, labels, k) for k in range(1, 7)]
        assert all(a <= b for a, b in zip(fractions, fractions[1:]))
        assert fractions[-1] == 1.0

    def test_bad_k_rejected(self):
        with pytest.raises(InvalidParameterError):
            metrics.topk_hit(np.array([0.5, 0.5]), 0, 3)

    def test_length_mismatch_rejected(self):
        with pytest.raises(InvalidParameterError):
            metrics.topk_accuracy([np.array([1.0, 0.0])], [0, 1], 1)


class TestEntropy:
    def test_one_hot_zero(self):
        assert metrics.mean_entropy([np.eye(5)[2]]) == 0.0

    def test_uniform_is_log_k(self):
        np.testing.assert_allclose(
            metrics.mean_entropy([np.full(10, 0.1)]), np.log(10.0), atol=1e-12
        )

    def test_two_way_split(self):
        p = np.zeros(8)
        p[0] = p[3] = 0.5
        np.testing.assert_allclose(metrics.mean_entropy([p]), np.log(2.0), atol=1e-12)

    def test_never_exceeds_log_k(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            p = rng.random(10)
            p /= p.sum()
            assert metrics.mean_entropy([p]) <= np.log(10.0) + 1e-9

    def test_mean_over_examples(self):
        one_hot = np.eye(4)[1]
        uniform = np.full(4, 0.25)
        np.testing.assert_allclose(
            metrics.mean_entropy([one_hot, uniform]), np.log(4.0) / 2.0, atol=1e-12
        )


class TestCrossEntropy:
    def test_perfect_predictions(self):
        preds = [np.eye(3)[1], np.eye(3)[0]]
        assert metrics.mean_true_cross_entropy(preds, [1, 0]) == 0.0

    def test_uniform(self):
        np.testing.assert_allclose(
            metrics.mean_true_cross_entropy([np.full(10, 0.1)], [4]),
            np.log(10.0),
            atol=1e-12,
        )

    def test_fixed_probability(self):
        p = np.array([0.3, 0.7])
        np.testing.assert_allclose(
            metrics.mean_true_cross_entropy([p, p], [0, 0]), -np.log(0.3), atol=1e-12
        )

    def test_zero_probability_floored(self):
        p = np.array([0.0, 1.0])
        np.testing.assert_allclose(
            metrics.mean_true_cross_entropy([p], [0]), -np.log(1e-12), atol=1e-9
        )


class TestBinarize:
    def test_zeros_and_positives(self):
        np.testing.assert_array_equal(
            metrics.binarize_activations(np.zeros((2, 3))), np.zeros((2, 3), bool)
        )
        np.testing.assert_array_equal(
            metrics.binarize_activations(np.full((2, 3), 0.1)), np.ones((2, 3), bool)
        )

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        x = np.maximum(rng.normal(size=(4, 5, 5)), 0.0)
        bits = metrics.binarize_activations(x)
        np.testing.assert_array_equal(
            metrics.binarize_activations(bits.astype(float)), bits
        )


class TestHammingInvariance:
    def setup_method(self):
        self.model = build_model(blurnet_s(10), seed=6)
        self.example = generate_shapestex(1, render_size=96, seed=17)[0]
        self.sharp = degrade_eval(self.example.image, delta_kernel(), 96, 64)
        self.blurred = degrade_eval(self.example.image, disk_kernel(4.0), 96, 64)

    def test_identical_inputs_zero_everywhere(self):
        inv = metrics.hamming_invariance_map(self.model, self.sharp, self.sharp)
        for name in inv.tap_names:
            np.testing.assert_array_equal(inv.maps[name], 0.0)

    def test_blurred_pair_in_range_and_nonzero(self):
        inv = metrics.hamming_invariance_map(self.model, self.sharp, self.blurred)
        assert inv.tap_names == ("P1", "P2", "P3")
        for name in inv.tap_names:
            m = inv.maps[name]
            assert np.all(m >= 0.0) and np.all(m <= 1.0)
        assert inv.tap_means()["P3"] > 0.0

    def test_map_resolutions_follow_taps(self):
        inv = metrics.hamming_invariance_map(self.model, self.sharp, self.blurred)
        assert inv.maps["P1"].shape == (32, 32)
        assert inv.maps["P2"].shape == (16, 16)
        assert inv.maps["P3"].shape == (8, 8)
        common = inv.resampled()
        assert all(m.shape == (32, 32) for m in common.values())
        assert np.all(common["P3"] >= -1e-12)

    def test_extent_mismatch_rejected(self):
        small = degrade_eval(self.example.image, delta_kernel(), 96, 32)
        with pytest.raises(ShapeError):
            metrics.hamming_invariance_map(self.model, self.sharp, small)


class TestMiou:
    def test_identical_masks(self):
        gt = np.array([[0, 1], [2, 1]])
        assert metrics.miou([gt], [gt], 3) == 1.0

    def test_disjoint_single_class(self):
        a = np.zeros((4, 4), dtype=int)
        b = np.ones((4, 4), dtype=int)
        # class 0 and class 1 unions are both the full grid, intersections 0
        assert metrics.miou([a], [b], 2) == 0.0

    def test_hand_counted_4x4(self):
        # gt: left half class 1; pred: top half class 1; background 0.
        # class 1: inter 4 (top-left quadrant), union 12 -> 1/3
        # class 0: inter 4 (bottom-right quadrant), union 12 -> 1/3
        gt = np.zeros((4, 4), dtype=int)
        gt[:, :2] = 1
        pred = np.zeros((4, 4), dtype=int)
        pred[:2, :] = 1
        np.testing.assert_allclose(metrics.miou([pred], [gt], 2), 1.0 / 3.0, atol=1e-15)

    def test_symmetric(self):
        rng = np.random.default_rng(5)
        a = rng.integers(0, 4, size=(9, 9))
        b = rng.integers(0, 4, size=(9, 9))
        assert metrics.miou([a], [b], 4) == metrics.miou([b], [a], 4)

    def test_absent_classes_excluded(self):
        a = np.zeros((3, 3), dtype=int)
        assert metrics.miou([a], [a], 5) == 1.0

    def test_whole_set_accumulation(self):
        # Pooled counting differs from per-image averaging: image 1 is a
        # perfect all-class-1 match, image 2 is all wrong.  Pooled:
        # class 0 IoU 0/16, class 1 IoU 16/32 -> mean 0.25 (not 0.5).
        ones = np.ones((4, 4), dtype=int)
        zeros = np.zeros((4, 4), dtype=int)
        value = metrics.miou([ones, ones], [ones, zeros], 2)
        np.testing.assert_allclose(value, 0.25, atol=1e-15)

    def test_empty_union_everywhere_is_none(self):
        assert metrics.miou([], [], 3) is None


def brute_force_band(mask, distance):
    boundary = metrics.boundary_pixels(mask)
    coords = np.argwhere(boundary)
    band = np.zeros(mask.shape, dtype=bool)
    for r in range(mask.shape[0]):
        for c in range(mask.shape[1]):
            for br, bc in coords:
                if (r - br) ** 2 + (c - bc) ** 2 <= distance**2:
                    band[r, c] = True
                    break
    return band


class TestBoundaryBand:
    def test_uniform_mask_empty_band(self):
        mask = np.full((8, 8), 3)
        assert not metrics.boundary_band(mask, 4).any()

    def test_distance_zero_is_boundary(self):
        mask = np.zeros((6, 6), dtype=int)
        mask[:, 3:] = 1
        band = metrics.boundary_band(mask, 0)
        np.testing.assert_array_equal(band, metrics.boundary_pixels(mask))

    def test_vertical_edge_16x16(self):
        # Boundary pixels are columns 7 and 8; distance <= 4 reaches
        # columns 3..12, i.e. 10 columns in full height.
        mask = np.zeros((16, 16), dtype=int)
        mask[:, 8:] = 1
        band = metrics.boundary_band(mask, 4)
        expected = np.zeros((16, 16), dtype=bool)
        expected[:, 3:13] = True
        np.testing.assert_array_equal(band, expected)
        assert band.sum() == 10 * 16

    def test_matches_brute_force(self):
        rng = np.random.default_rng(9)
        for _ in range(5):
            mask = rng.integers(0, 3, size=(10, 10))
            for d in (0.0, 1.0, 2.5, 4.0):
                np.testing.assert_array_equal(
                    metrics.boundary_band(mask, d), brute_force_band(mask, d)
                )

    def test_band_grows_with_distance(self):
        rng = np.random.default_rng(2)
        mask = rng.integers(0, 2, size=(12, 12))
        prev = metrics.boundary_band(mask, 0)
        for d in (1, 2, 3, 5):
            cur = metrics.boundary_band(mask, d)
            assert np.all(cur[prev])  # superset
            prev = cur

    def test_negative_distance_rejected(self):
        with pytest.raises(InvalidParameterError):
            metrics.boundary_band(np.zeros((4, 4), dtype=int), -1)


class TestBoundaryMiou:
    def test_perfect_prediction(self):
        gt = np.zeros((8, 8), dtype=int)
        gt[:, 4:] = 1
        assert metrics.boundary_miou([gt], [gt], 2) == 1.0

    def test_uniform_gt_returns_none(self):
        gt = np.zeros((8, 8), dtype=int)
        pred = np.ones((8, 8), dtype=int)
        assert metrics.boundary_miou([pred], [gt], 2) is None

    def test_hand_counted_8x8_strip(self):
        # gt: columns 0-3 class 1, columns 4-7 class 2.  pred mislabels
        # the boundary-adjacent column 4 as class 1.  Band (distance 2)
        # spans columns 1..6.  In-band counts:
        #   class 1: inter 24 (cols 1-3), union 32 (cols 1-4) -> 3/4
        #   class 2: inter 16 (cols 5-6), union 24 (cols 4-6) -> 2/3
        # mean = 17/24
        gt = np.full((8, 8), 2, dtype=int)
        gt[:, :4] = 1
        pred = gt.copy()
        pred[:, 4] = 1
        value = metrics.boundary_miou([pred], [gt], 3, distance=2)
        np.testing.assert_allclose(value, 17.0 / 24.0, atol=1e-15)

    def test_uniform_examples_skipped_not_fatal(self):
        uniform = np.zeros((6, 6), dtype=int)
        gt = np.zeros((6, 6), dtype=int)
        gt[:, 3:] = 1
        value = metrics.boundary_miou([uniform, gt], [uniform, gt], 2, distance=1)
        assert value == 1.0
