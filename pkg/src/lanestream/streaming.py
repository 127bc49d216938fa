"""Temporal streaming: BEV warp-fusion, query propagation, stream losses.

Memory flows frame to frame as a StreamBundle: the fused BEV grid, the
top-k most confident detached queries with their geometry in the memory
frame, the instance ids those slots were matched to, and the ego pose.
At the next frame the BEV memory is warped into the new ego frame and
fused through a GRU cell, while the queries pass through a residual
MLP conditioned on the relative pose and re-enter the decoder after
layer 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .core import (
    BEVGridSpec,
    BOUNDARY_TYPE_INDEX,
    LANE_CLASS_INDEX,
    LANE_CLASSES,
    FrameSample,
    LaneGraph,
    LaneSegment,
    Pose,
    apply_transform,
    denormalize_coords,
    normalize_coords,
    relative_transform,
)
from .denoise import DnBatch
from .engine import Tensor
from .matching import Assignment
from .model import DecodeResult, LaneSegmentModel
from .synth import instance_region_mask

STREAM_WEIGHTS = {
    "coord": 0.025,
    "cls": 1.5,
    "types": 0.01,
    "seg_ce": 1.0,
    "seg_dice": 1.0,
}


@dataclass
class StreamBundle:
    """Detached per-frame memory handed to the next frame."""

    content: Tensor  # (S, C) query content, detached
    centers_m: np.ndarray  # (S, M, 3) centerline points, memory ego frame
    boundaries_m: np.ndarray  # (S, 2, M, 3) left/right boundaries, memory frame
    slot_ids: list  # per-slot matched instance id or None
    pose: Pose
    bev: Tensor  # (H, W, C) fused features, detached

    def __len__(self):
        return self.content.data.shape[0]


# BEV memory ------------------------------------------------------------------


def warp_locations(grid: BEVGridSpec, psi_back: Pose) -> np.ndarray:
    """(H*W, 2) unit locations of current cell centers in the memory frame."""
    centers = grid.cell_centers().reshape(-1, 2)
    pts = np.concatenate([centers, np.zeros((len(centers), 1))], axis=1)
    prev = apply_transform(psi_back, pts)
    return np.stack(
        [
            (prev[:, 0] + grid.x_range) / (2.0 * grid.x_range),
            (prev[:, 1] + grid.y_range) / (2.0 * grid.y_range),
        ],
        axis=1,
    )


def warp_features(bev_prev: Tensor, psi_back: Pose, grid: BEVGridSpec) -> Tensor:
    """Warp an (H, W, C) grid into the current frame; zeros where the
    lookup leaves the memory window."""
    locs = warp_locations(grid, psi_back)
    return E.grid_sample_bilinear(bev_prev, locs)


def warp_fuse(model: LaneSegmentModel, bev_prev: Tensor, bev_curr: Tensor, psi_back: Pose) -> Tensor:
    """GRU-fuse warped memory features with the current frame's features.

    The current frame is the GRU state and the warped memory the gated
    input: with the update gate biased closed at initialization, fusion
    starts as the current frame alone, so turning streaming on does not
    disturb what the single-frame pathway has already learned. Gates
    open only where the optimizer finds memory worth mixing in.
    """
    grid = model.grid
    h, w = grid.height_cells, grid.width_cells
    c = model.config.channels
    warped = warp_features(bev_prev, psi_back, grid)
    curr = E.reshape(bev_curr, (h * w, c))
    fused = E.gru_cell(curr, warped, model.gru_params())
    return E.reshape(fused, (h, w, c))


# query memory ----------------------------------------------------------------


def propagate_queries(model: LaneSegmentModel, bundle: StreamBundle, pose_curr: Pose):
    """Carry stream queries into the current frame.

    Content passes through a residual MLP conditioned on the flattened
    relative pose (zero-initialized, so propagation starts as identity);
    geometry is transformed exactly and the normalized refs re-clamped.
    Returns (content, refs_norm, centers_m, boundaries_m).
    """
    P = model.params
    psi = relative_transform(bundle.pose, pose_curr)
    s = len(bundle)
    feats = np.tile(psi.flat(), (s, 1))
    inp = E.concat([bundle.content, E.as_tensor(feats)], axis=1)
    hidden = E.relu(E.linear(inp, P["stream.prop.w0"], P["stream.prop.b0"]))
    delta = E.linear(hidden, P["stream.prop.w1"], P["stream.prop.b1"])
    content = E.add(bundle.content, delta)
    centers = apply_transform(psi, bundle.centers_m)
    boundaries = apply_transform(psi, bundle.boundaries_m)
    refs = np.clip(normalize_coords(centers, model.grid), 0.0, 1.0)
    return content, refs, centers, boundaries


def select_topk(confidence: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest-confidence slots, ties to the lower index."""
    order = np.argsort(-np.asarray(confidence), kind="stable")
    return np.sort(order[:k])


def make_bundle(
    model: LaneSegmentModel,
    result: DecodeResult,
    bev: Tensor,
    gt: LaneGraph | None,
    pose: Pose,
    assignment: Assignment | None = None,
    k: int | None = None,
) -> StreamBundle:
    """Detach the top-k matching queries and the fused BEV into memory."""
    k = model.config.stream_slots if k is None else k
    slots = select_topk(result.confidence(), k)
    content = Tensor(result.content.data[slots].copy())
    final = result.final
    centers = denormalize_coords(final["refs"].data[slots], model.grid)
    boundaries = final["coords"].data[slots][:, 1:]
    ids: list = [None] * len(slots)
    if gt is not None and assignment is not None:
        pred_to_gt = assignment.pred_to_gt()
        ids = [
            gt.segments[pred_to_gt[int(s)]].instance_id if int(s) in pred_to_gt else None
            for s in slots
        ]
    return StreamBundle(content, centers, boundaries, ids, pose, Tensor(bev.data.copy()))


# stream supervision ----------------------------------------------------------


def _inside_window(seg: LaneSegment, grid: BEVGridSpec) -> bool:
    # window membership follows the clipping rule: judged on the centerline
    pts = seg.centerline
    tol = 1e-9
    return bool(
        (np.abs(pts[:, 0]) <= grid.x_range + tol).all()
        and (np.abs(pts[:, 1]) <= grid.y_range + tol).all()
    )


def stream_targets(
    slot_ids: list,
    gt: LaneGraph,
    prev_gt: LaneGraph | None,
    psi: Pose,
    grid: BEVGridSpec,
    id_track: bool = True,
) -> tuple[np.ndarray, list]:
    """Supervision targets for stream slots.

    With id tracking, each slot looks up the current GT segment carrying
    its instance id. Without it, the previous GT segment is transformed
    into the current frame and dropped whenever any transformed point
    leaves the window.
    """
    rows, targets = [], []
    current = {s.instance_id: s for s in gt.segments}
    previous = {s.instance_id: s for s in (prev_gt.segments if prev_gt else [])}
    for j, i in enumerate(slot_ids):
        if i is None:
            continue
        if id_track:
            seg = current.get(i)
            if seg is None:
                continue
        else:
            prev_seg = previous.get(i)
            if prev_seg is None:
                continue
            seg = prev_seg.transformed(psi)
            if not _inside_window(seg, grid):
                continue
        rows.append(j)
        targets.append(seg)
    return np.asarray(rows, dtype=int), targets


def streaming_losses(
    model: LaneSegmentModel,
    bev: Tensor,
    content: Tensor,
    refs_norm: np.ndarray,
    slot_ids: list,
    gt: LaneGraph,
    prev_gt: LaneGraph | None = None,
    psi: Pose | None = None,
    id_track: bool = True,
    weights: dict | None = None,
) -> dict:
    """Aux-head supervision on propagated stream queries before decoding.

    Five terms: coordinate L1, focal class, boundary-type CE, mask CE and
    mask dice, combined with the shared loss weights. Slots without a
    target count as background for the class term only.
    """
    w = dict(STREAM_WEIGHTS)
    if weights:
        w.update(weights)
    zero = E.as_tensor(0.0)
    terms = {k: zero for k in ("coord", "cls", "types", "seg_ce", "seg_dice")}
    s = content.data.shape[0]
    out = {"covered": 0}
    if s == 0:
        out.update(terms)
        out["total"] = zero
        return out

    rows, targets = stream_targets(slot_ids, gt, prev_gt, psi, model.grid, id_track)
    cls_logits = model.head(content, "head.cls")
    cls_target = np.zeros((s, len(LANE_CLASSES)))

    if len(rows):
        kept = E.take_rows(content, rows)
        center = model.denormalize(E.as_tensor(refs_norm[rows]))
        off = model.offsets(kept)
        left = E.add(center, off)
        right = E.add(center, E.mul(off, -1.0))
        coords = E.concat(
            [E.reshape(t, (len(rows), 1, center.data.shape[1], 3)) for t in (center, left, right)],
            axis=1,
        )
        target_coords = np.stack([t.coordinates() for t in targets])
        terms["coord"] = E.l1_loss(coords, target_coords)

        cls_idx = [LANE_CLASS_INDEX[t.lane_class] for t in targets]
        cls_target[rows, cls_idx] = 1.0

        type_logits = E.reshape(model.head(kept, "head.type"), (2 * len(rows), 3))
        type_labels = np.array(
            [[BOUNDARY_TYPE_INDEX[t.left_type], BOUNDARY_TYPE_INDEX[t.right_type]] for t in targets]
        ).reshape(-1)
        terms["types"] = E.cross_entropy(type_logits, type_labels)

        mask_probs = E.sigmoid(model.bev_mask_logits(kept, bev))
        mask_target = np.stack(
            [instance_region_mask(t, model.grid).reshape(-1).astype(float) for t in targets]
        )
        terms["seg_ce"] = E.binary_cross_entropy(mask_probs, mask_target)
        terms["seg_dice"] = E.dice_loss(mask_probs, mask_target)

    terms["cls"] = E.focal_loss(E.sigmoid(cls_logits), cls_target)
    total = zero
    for key in ("coord", "cls", "types", "seg_ce", "seg_dice"):
        total = E.add(total, E.mul(terms[key], w[key]))
    out.update(terms)
    out["total"] = total
    out["covered"] = len(rows)
    return out


# frame orchestration ----------------------------------------------------------


def stream_step(
    model: LaneSegmentModel,
    frame: FrameSample,
    bundle: StreamBundle | None,
    dn: DnBatch | None = None,
    dynamic_pe: bool = True,
):
    """Encode, fuse with memory if present, and decode one frame.

    Returns (result, fused_bev, propagated) where propagated is the
    (content, refs_norm) pair fed into the decoder, or None on the first
    frame of a sequence.
    """
    curr = model.encode(frame.bev_features)
    propagated = None
    if bundle is not None and len(bundle) > 0:
        psi_back = relative_transform(frame.pose, bundle.pose)
        bev = warp_fuse(model, bundle.bev, curr, psi_back)
        content, refs, _, _ = propagate_queries(model, bundle, frame.pose)
        propagated = (content, refs)
    else:
        bev = curr
    result = model.decode(bev, dn=dn, stream=propagated, dynamic_pe=dynamic_pe)
    return result, bev, propagated


# coverage accounting -----------------------------------------------------------


def coverage_counts(frames: list, grid: BEVGridSpec) -> dict:
    """Target availability of the two stream-supervision routes.

    For every frame pair, instances present in both frames are always
    reachable by instance id; the transformed-GT route additionally
    requires the previous geometry to stay fully inside the window after
    the ego-motion transform.
    """
    id_count = 0
    transformed_count = 0
    crossing_frames = 0
    for prev, curr in zip(frames, frames[1:]):
        psi = relative_transform(prev.pose, curr.pose)
        prev_by_id = {s.instance_id: s for s in prev.gt.segments}
        crossing = False
        for seg in curr.gt.segments:
            prev_seg = prev_by_id.get(seg.instance_id)
            if prev_seg is None:
                continue
            id_count += 1
            if _inside_window(prev_seg.transformed(psi), grid):
                transformed_count += 1
            else:
                crossing = True
        if crossing:
            crossing_frames += 1
    return {
        "id_track": id_count,
        "transformed": transformed_count,
        "crossing_frames": crossing_frames,
    }
