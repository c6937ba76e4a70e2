"""
Tests for the attention-to-patch localizer
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from app.config.settings import LocalizerConfig
from app.errors import UsageError
from app.tensor import Tape
from app.tools.localizer import (
    InstanceBox,
    connected_components,
    covered_fraction,
    crop_resize,
    localize,
    map_box_to_image,
    select_top_k,
    threshold_mask,
    union_iou,
)


@pytest.fixture
def two_blocks():
    """8x8 map with two separate 2x2 blocks of attention."""
    omega = np.zeros((8, 8))
    omega[0:2, 0:2] = 1.0
    omega[4:6, 4:6] = 0.5
    return omega


class TestThresholdMask:
    """Tests for relative thresholding"""

    def test_constant_positive_map(self):
        assert_array_equal(threshold_mask(np.full((1, 1, 3, 4), 0.7), 0.3), np.ones((3, 4)))

    def test_two_values(self):
        assert_array_equal(threshold_mask(np.array([[0.1, 0.9]]), 0.5), [[0, 1]])

    def test_zero_map(self):
        assert not threshold_mask(np.zeros((4, 4)), 0.5).any()

    def test_threshold_out_of_range(self):
        with pytest.raises(UsageError):
            threshold_mask(np.ones((2, 2)), 1.0)
        with pytest.raises(UsageError):
            threshold_mask(np.ones((2, 2)), 0.0)

    def test_scale_invariance(self):
        omega = np.random.default_rng(0).uniform(size=(6, 6))
        assert_array_equal(threshold_mask(omega, 0.4), threshold_mask(omega * 37.5, 0.4))

    def test_batched_map_rejected(self):
        with pytest.raises(UsageError):
            threshold_mask(np.ones((2, 1, 3, 3)), 0.5)


class TestConnectedComponents:
    """Tests for 4-connected grouping"""

    def test_two_blocks(self, two_blocks):
        boxes = connected_components((two_blocks > 0).astype(np.uint8))
        assert [box.coords for box in boxes] == [(0, 0, 2, 2), (4, 4, 6, 6)]
        assert [box.area for box in boxes] == [4, 4]

    def test_all_ones(self):
        assert [box.coords for box in connected_components(np.ones((5, 7), dtype=np.uint8))] == [(0, 0, 5, 7)]

    def test_all_zeros(self):
        assert connected_components(np.zeros((5, 5), dtype=np.uint8)) == []

    def test_diagonal_neighbours_are_separate(self):
        mask = np.array([[1, 0], [0, 1]], dtype=np.uint8)
        assert [box.coords for box in connected_components(mask)] == [(0, 0, 1, 1), (1, 1, 2, 2)]

    def test_min_area_drops_small(self):
        mask = np.zeros((6, 6), dtype=np.uint8)
        mask[0, 0] = 1
        mask[3:6, 3:6] = 1
        boxes = connected_components(mask, min_component_area=2)
        assert [box.coords for box in boxes] == [(3, 3, 6, 6)]


class TestSelectTopK:
    """Tests for ranking by attention mass"""

    def test_scores_order(self):
        omega = np.zeros((1, 9))
        omega[0, 0], omega[0, 3], omega[0, 6] = 0.2, 0.9, 0.5
        boxes = [InstanceBox(0, c, 1, c + 1) for c in (0, 3, 6)]
        chosen = select_top_k(boxes, omega, 2)
        assert [box.col0 for box in chosen] == [3, 6]
        assert chosen[0].score == pytest.approx(0.9)

    def test_empty_fallback(self):
        chosen = select_top_k([], np.zeros((5, 6)), 3)
        assert [box.coords for box in chosen] == [(0, 0, 5, 6)]

    def test_equal_scores_prefer_larger_area(self):
        omega = np.zeros((4, 8))
        omega[0, 0] = 1.0
        omega[2:4, 4:6] = 0.25
        boxes = connected_components((omega > 0).astype(np.uint8))
        chosen = select_top_k(boxes, omega, 2)
        assert [box.coords for box in chosen] == [(2, 4, 4, 6), (0, 0, 1, 1)]

    def test_full_tie_prefers_top_left(self):
        omega = np.ones((1, 5))
        boxes = [InstanceBox(0, 4, 1, 5), InstanceBox(0, 0, 1, 1)]
        assert [box.col0 for box in select_top_k(boxes, omega, 2)] == [0, 4]

    def test_scores_use_component_pixels(self):
        omega = np.full((3, 3), 0.1)
        omega[0, 0] = omega[1, 0] = omega[1, 1] = 1.0
        mask = threshold_mask(omega, 0.5)
        (box,) = select_top_k(connected_components(mask), omega, 1)
        assert box.coords == (0, 0, 2, 2)
        assert box.score == pytest.approx(3.0)

    def test_k_must_be_positive(self):
        with pytest.raises(UsageError):
            select_top_k([], np.ones((2, 2)), 0)


class TestMapBoxToImage:
    """Tests for rescaling map boxes to pixels"""

    def test_identity(self):
        box = InstanceBox(1, 2, 3, 5)
        assert map_box_to_image(box, (6, 6), (6, 6)).coords == (1, 2, 3, 5)

    def test_exact_ratio(self):
        assert map_box_to_image(InstanceBox(0, 0, 1, 1), (7, 7), (224, 224)).coords == (0, 0, 32, 32)

    def test_outward_rounding(self):
        assert map_box_to_image(InstanceBox(3, 3, 5, 5), (7, 7), (100, 100)).coords == (42, 42, 72, 72)

    def test_contains_scaled_box(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            r0, c0 = (int(v) for v in rng.integers(0, 6, size=2))
            r1, c1 = r0 + int(rng.integers(1, 7 - r0)), c0 + int(rng.integers(1, 7 - c0))
            mapped = map_box_to_image(InstanceBox(r0, c0, r1, c1), (7, 7), (50, 61))
            assert mapped.row0 <= r0 * 50 / 7 and mapped.row1 >= r1 * 50 / 7
            assert mapped.col0 <= c0 * 61 / 7 and mapped.col1 >= c1 * 61 / 7
            assert 0 <= mapped.row0 < mapped.row1 <= 50
            assert 0 <= mapped.col0 < mapped.col1 <= 61


class TestCropAndLocalize:
    """Tests for cropping and the whole localization pipeline"""

    def test_crop_equal_size(self):
        image = np.random.default_rng(2).uniform(size=(1, 3, 8, 8))
        tape = Tape()
        patch = crop_resize(tape, tape.constant(image), InstanceBox(2, 2, 6, 6), 4)
        assert_array_equal(patch.data, image[:, :, 2:6, 2:6])

    def test_degenerate_box(self):
        tape = Tape()
        with pytest.raises(UsageError, match="zero area"):
            crop_resize(tape, tape.constant(np.zeros((1, 3, 8, 8))), InstanceBox(3, 1, 3, 5), 4)

    def test_localize_two_blocks(self, two_blocks):
        result = localize(two_blocks, (32, 32), LocalizerConfig(top_k=3, rel_threshold=0.3))
        assert [box.coords for box in result.map_boxes] == [(0, 0, 2, 2), (4, 4, 6, 6)]
        assert [box.coords for box in result.pixel_boxes] == [(0, 0, 8, 8), (16, 16, 24, 24)]

    def test_localize_zero_map_falls_back(self):
        result = localize(np.zeros((1, 1, 4, 4)), (16, 16), LocalizerConfig(top_k=2))
        assert [box.coords for box in result.pixel_boxes] == [(0, 0, 16, 16)]

    def test_localize_deterministic(self):
        omega = np.random.default_rng(3).uniform(size=(1, 1, 6, 6))
        config = LocalizerConfig(top_k=3)
        first = localize(omega, (48, 48), config)
        second = localize(omega, (48, 48), config)
        assert first.pixel_boxes == second.pixel_boxes
        assert_array_equal(first.mask, second.mask)


class TestBoxScores:
    """Tests for localization quality measures"""

    def test_identity_iou(self):
        boxes = [InstanceBox(0, 0, 4, 4), InstanceBox(6, 6, 8, 8)]
        assert union_iou(boxes, boxes, (10, 10)) == 1.0

    def test_disjoint_iou(self):
        assert union_iou([InstanceBox(0, 0, 2, 2)], [InstanceBox(4, 4, 6, 6)], (8, 8)) == 0.0

    def test_half_overlap(self):
        iou = union_iou([InstanceBox(0, 0, 2, 4)], [InstanceBox(0, 0, 4, 4)], (4, 4))
        assert_allclose(iou, 0.5)

    def test_empty_sets(self):
        assert union_iou([], [], (4, 4)) == 1.0

    def test_covered_fraction(self):
        truth = [InstanceBox(0, 0, 2, 2), InstanceBox(4, 4, 6, 6)]
        assert covered_fraction([InstanceBox(0, 0, 3, 3)], truth) == (1, 2)

    def test_coverage_needs_a_single_box(self):
        truth = [InstanceBox(0, 0, 4, 4)]
        halves = [InstanceBox(0, 0, 4, 2), InstanceBox(0, 2, 4, 4)]
        assert covered_fraction(halves, truth) == (0, 1)
        assert covered_fraction([*halves, InstanceBox(0, 0, 4, 3)], truth) == (1, 1)

    def test_nothing_predicted(self):
        assert covered_fraction([], [InstanceBox(1, 1, 3, 3)]) == (0, 1)
