"""Bipartite assignment between predictions and ground truth.

The matching cost mirrors the training-loss weighting: coordinate L1,
classification focal cost and mask dice cost. Instance identities of
matched slots feed the streaming supervision.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import LANE_CLASS_INDEX, LaneGraph

# cost weights: coordinate L1, mask dice, classification focal
COST_COORD = 0.025
COST_MASK = 3.0
COST_CLASS = 1.5

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
_EPS = 1e-7


@dataclass
class Assignment:
    """One-to-one pred-to-GT pairing, rows sorted ascending."""

    pairs: list[tuple[int, int]]
    total_cost: float

    def pred_to_gt(self) -> dict[int, int]:
        return dict(self.pairs)

    def gt_to_pred(self) -> dict[int, int]:
        return {g: p for p, g in self.pairs}


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-cost one-to-one assignment of rows to columns.

    Equal-cost solutions are canonicalized so lower rows take lower
    columns wherever columns can be exchanged at no cost.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-d, got shape {cost.shape}")
    if cost.size and not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    if cost.size == 0:
        return Assignment([], 0.0)
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    changed = True
    while changed:
        changed = False
        for a in range(len(pairs)):
            for b in range(a + 1, len(pairs)):
                (r1, c1), (r2, c2) = pairs[a], pairs[b]
                if c2 < c1 and np.isclose(
                    cost[r1, c1] + cost[r2, c2], cost[r1, c2] + cost[r2, c1]
                ):
                    pairs[a], pairs[b] = (r1, c2), (r2, c1)
                    changed = True
    total = float(sum(cost[r, c] for r, c in pairs))
    return Assignment(pairs, total)


def coordinate_l1(pred_coords: np.ndarray, gt_coords: np.ndarray) -> np.ndarray:
    """Pairwise coordinate cost: mean per-point L1 over all three polylines.

    pred_coords (n, 3, M, 3), gt_coords (m, 3, M, 3) -> (n, m).
    """
    p = pred_coords.reshape(pred_coords.shape[0], -1)
    g = gt_coords.reshape(gt_coords.shape[0], -1)
    points = pred_coords.shape[1] * pred_coords.shape[2]
    return np.abs(p[:, None, :] - g[None, :, :]).sum(axis=2) / points


def focal_class_cost(class_probs: np.ndarray, gt_labels: np.ndarray) -> np.ndarray:
    """Pairwise focal classification cost, positive minus negative part."""
    p = np.clip(class_probs, _EPS, 1.0 - _EPS)
    pos = FOCAL_ALPHA * (1.0 - p) ** FOCAL_GAMMA * (-np.log(p))
    neg = (1.0 - FOCAL_ALPHA) * p ** FOCAL_GAMMA * (-np.log(1.0 - p))
    return (pos - neg)[:, gt_labels]


def mask_dice_cost(mask_probs: np.ndarray, gt_masks: np.ndarray) -> np.ndarray:
    """Pairwise dice loss between (n, D) mask probabilities and (m, D) targets."""
    num = 2.0 * mask_probs @ gt_masks.T + _EPS
    den = mask_probs.sum(axis=1)[:, None] + gt_masks.sum(axis=1)[None, :] + _EPS
    return 1.0 - num / den


def lanesegment_cost(
    pred_coords: np.ndarray,
    pred_class_probs: np.ndarray,
    pred_mask_probs: np.ndarray | None,
    gt: LaneGraph,
    gt_masks: np.ndarray | None = None,
) -> np.ndarray:
    """Full matching cost matrix between predictions and a GT lane graph."""
    gt_coords = np.stack([s.coordinates() for s in gt.segments])
    gt_labels = np.array([LANE_CLASS_INDEX[s.lane_class] for s in gt.segments])
    cost = COST_COORD * coordinate_l1(pred_coords, gt_coords)
    cost = cost + COST_CLASS * focal_class_cost(pred_class_probs, gt_labels)
    if pred_mask_probs is not None and gt_masks is not None:
        cost = cost + COST_MASK * mask_dice_cost(pred_mask_probs, gt_masks)
    return cost


@dataclass
class IdTrack:
    """Persistent GT instance identity per query slot."""

    slot_to_id: dict[int, int] = field(default_factory=dict)

    def get(self, slot: int) -> int | None:
        return self.slot_to_id.get(slot)

    def __len__(self):
        return len(self.slot_to_id)


def track_ids(assignment: Assignment, gt: LaneGraph, slots) -> IdTrack:
    """Record which GT instance each selected slot was matched to.

    Slots without a match at this frame are simply absent from the track.
    """
    ids = gt.instance_ids()
    if any(i is None for i in ids):
        raise ValueError("GT instance ids required for id tracking")
    slot_set = set(int(s) for s in slots)
    mapping = {}
    for pred_idx, gt_idx in assignment.pairs:
        if pred_idx in slot_set:
            mapping[pred_idx] = int(ids[gt_idx])
    return IdTrack(mapping)
