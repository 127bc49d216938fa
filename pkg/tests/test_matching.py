"""Assignment oracles: implementation vs exhaustive search."""
import numpy as np
import pytest

from conftest import hungarian_bruteforce
from lanestream.core import LaneGraph, LaneSegment
from lanestream.matching import (
    Assignment,
    coordinate_l1,
    focal_class_cost,
    hungarian,
    lanesegment_cost,
    mask_dice_cost,
    track_ids,
)


def make_segment(y0, iid=None, lane_class="road_line"):
    xs = np.linspace(0, 15, 10)
    c = np.stack([xs, np.full(10, float(y0)), np.zeros(10)], axis=1)
    return LaneSegment(c, c + [0, 1.75, 0], c - [0, 1.75, 0], lane_class=lane_class, instance_id=iid)


def test_hungarian_identity_favoring():
    cost = np.ones((3, 3)) - np.eye(3)
    out = hungarian(cost)
    assert out.pairs == [(0, 0), (1, 1), (2, 2)]
    assert out.total_cost == 0.0


def test_hungarian_small_example():
    out = hungarian(np.array([[4.0, 1.0], [2.0, 3.0]]))
    assert out.pairs == [(0, 1), (1, 0)]
    assert out.total_cost == 3.0


def test_hungarian_matches_bruteforce():
    rng = np.random.default_rng(21)
    for trial in range(200):
        n = int(rng.integers(1, 8))
        m = int(rng.integers(1, 8))
        cost = rng.uniform(0, 10, size=(n, m))
        got = hungarian(cost)
        pairs, total = hungarian_bruteforce(cost)
        assert got.total_cost == pytest.approx(total, abs=1e-9)
        assert sorted(got.pairs) == sorted(pairs)


def test_hungarian_tie_canonicalization():
    out = hungarian(np.zeros((3, 4)))
    assert out.pairs == [(0, 0), (1, 1), (2, 2)]


def test_hungarian_column_permutation_equivariance():
    rng = np.random.default_rng(22)
    cost = rng.uniform(0, 5, size=(5, 5))
    perm = rng.permutation(5)
    base = hungarian(cost).pred_to_gt()
    permuted = hungarian(cost[:, perm]).pred_to_gt()
    for row, col in base.items():
        assert perm[permuted[row]] == col


def test_hungarian_rejects_nonfinite():
    with pytest.raises(ValueError, match="non-finite"):
        hungarian(np.array([[np.nan, 1.0], [1.0, 2.0]]))


def test_hungarian_rectangular_leaves_rows_unmatched():
    cost = np.array([[0.0, 5.0], [1.0, 0.1], [2.0, 0.2]])
    out = hungarian(cost)
    assert len(out.pairs) == 2
    assert out.pairs == [(0, 0), (1, 1)]


def test_coordinate_l1_known_value():
    a = np.zeros((1, 3, 10, 3))
    b = np.zeros((1, 3, 10, 3))
    b[..., 1] = 2.0  # every point offset 2 m in y
    assert coordinate_l1(a, b)[0, 0] == pytest.approx(2.0)


def test_exact_prediction_is_row_minimum():
    gt_segs = [make_segment(0.0, iid=0), make_segment(3.5, iid=1), make_segment(-3.5, iid=2)]
    gt = LaneGraph(gt_segs, np.zeros((3, 3)))
    pred_coords = np.stack([s.coordinates() for s in gt_segs])
    pred_coords = pred_coords + np.random.default_rng(1).normal(0, 2.0, pred_coords.shape)
    pred_coords[1] = gt_segs[1].coordinates()  # exact copy of GT 1
    probs = np.full((3, 2), 0.2)
    probs[1, 0] = 0.95  # confident correct class
    cost = lanesegment_cost(pred_coords, probs, None, gt)
    assert np.argmin(cost[1]) == 1
    assert cost[1, 1] < cost[1].min() + 1e-12 or (cost[1] > cost[1, 1]).sum() == 2


def test_lanesegment_cost_recomposition():
    rng = np.random.default_rng(23)
    gt_segs = [make_segment(0.0, iid=0), make_segment(3.5, iid=1, lane_class="pedestrian_crossing")]
    gt = LaneGraph(gt_segs, np.zeros((2, 2)))
    pred_coords = rng.normal(0, 5, size=(4, 3, 10, 3))
    probs = rng.uniform(0.05, 0.95, size=(4, 2))
    masks = rng.uniform(0, 1, size=(4, 50))
    gt_masks = (rng.uniform(size=(2, 50)) > 0.5).astype(float)
    cost = lanesegment_cost(pred_coords, probs, masks, gt, gt_masks)
    gt_coords = np.stack([s.coordinates() for s in gt_segs])
    labels = np.array([0, 1])
    expect = (
        0.025 * coordinate_l1(pred_coords, gt_coords)
        + 1.5 * focal_class_cost(probs, labels)
        + 3.0 * mask_dice_cost(masks, gt_masks)
    )
    np.testing.assert_allclose(cost, expect, atol=1e-12)


def test_mask_dice_cost_identical_masks():
    m = (np.random.default_rng(2).uniform(size=(3, 40)) > 0.5).astype(float)
    np.testing.assert_allclose(np.diag(mask_dice_cost(m, m)), 0.0, atol=1e-6)


def test_track_ids():
    gt = LaneGraph([make_segment(0.0, iid=7), make_segment(3.5, iid=9)], np.zeros((2, 2)))
    assign = Assignment([(4, 0), (11, 1)], 0.0)
    track = track_ids(assign, gt, slots=[4, 5, 11])
    assert track.slot_to_id == {4: 7, 11: 9}
    assert track.get(5) is None
    assert len(track) == 2


def test_track_ids_requires_instance_ids():
    gt = LaneGraph([make_segment(0.0)], np.zeros((1, 1)))
    with pytest.raises(ValueError, match="instance ids"):
        track_ids(Assignment([(0, 0)], 0.0), gt, slots=[0])
