"""Query denoising: noised ground-truth groups with isolated attention.

Each denoising group holds every ground-truth segment once, with its
centerline shifted by a fraction of the instance bounding box and its
class label randomly flipped. Groups only attend within themselves, so
the matching queries never observe ground-truth-derived content.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .core import (
    BEVGridSpec,
    BOUNDARY_TYPE_INDEX,
    LANE_CLASS_INDEX,
    LaneGraph,
    normalize_coords,
)

DN_TOTAL = 240
DN_BOX_NOISE = 0.2
DN_LABEL_FLIP = 0.5
DN_WEIGHTS = {"coord": 0.025, "cls": 1.0, "types": 0.01, "topo": 5.0}


@dataclass
class DnBatch:
    """Noised ground-truth slots appended after the matching queries."""

    refs: np.ndarray  # (D, M, 3) noisy centerline references, normalized
    labels: np.ndarray  # (D,) noised class index
    types: np.ndarray  # (D, 2) noised left/right boundary type indices
    target: np.ndarray  # (D,) ground-truth index, -1 for padding
    group: np.ndarray  # (D,) group index, -1 for padding
    groups: int

    @property
    def total(self) -> int:
        return len(self.labels)

    @property
    def used(self) -> np.ndarray:
        return np.where(self.target >= 0)[0]


def make_dn_batch(
    gt: LaneGraph,
    grid: BEVGridSpec,
    rng: np.random.Generator,
    total: int = DN_TOTAL,
    box_noise: float = DN_BOX_NOISE,
    label_flip: float = DN_LABEL_FLIP,
) -> DnBatch:
    n = len(gt.segments)
    if n > total:
        raise ValueError(f"{n} ground-truth segments exceed the denoising budget {total}")
    groups = total // n if n else 0
    used = groups * n
    refs = np.full((total, gt.segments[0].centerline.shape[0] if n else 1, 3), 0.5)
    if n == 0:
        refs = np.full((total, 10, 3), 0.5)
    labels = np.zeros(total, dtype=np.int64)
    types = np.zeros((total, 2), dtype=np.int64)
    target = np.full(total, -1, dtype=np.int64)
    group = np.full(total, -1, dtype=np.int64)
    if n:
        extents = np.stack([np.ptp(s.coordinates().reshape(-1, 3), axis=0) for s in gt.segments])
        shifts = rng.uniform(-1.0, 1.0, size=(used, 3)) * box_noise * np.tile(extents, (groups, 1))
        flips = rng.uniform(size=used) < label_flip
        type_flips = rng.uniform(size=(used, 2)) < label_flip
        type_alts = rng.integers(1, len(BOUNDARY_TYPE_INDEX), size=(used, 2))
        for g in range(groups):
            for j, seg in enumerate(gt.segments):
                d = g * n + j
                noisy = seg.centerline + shifts[d]
                refs[d] = np.clip(normalize_coords(noisy, grid), 0.0, 1.0)
                cls = LANE_CLASS_INDEX[seg.lane_class]
                labels[d] = 1 - cls if flips[d] else cls
                clean = np.array(
                    [BOUNDARY_TYPE_INDEX[seg.left_type], BOUNDARY_TYPE_INDEX[seg.right_type]]
                )
                noised = (clean + type_alts[d]) % len(BOUNDARY_TYPE_INDEX)
                types[d] = np.where(type_flips[d], noised, clean)
                target[d] = j
                group[d] = g
    return DnBatch(refs, labels, types, target, group, groups)


def attention_blocks(n_queries: int, dn: DnBatch | None) -> list[np.ndarray]:
    """Index blocks that may attend within themselves, covering all tokens."""
    blocks = [np.arange(n_queries)]
    if dn is None:
        return blocks
    n = int((dn.target >= 0).sum() // dn.groups) if dn.groups else 0
    for g in range(dn.groups):
        blocks.append(n_queries + np.arange(g * n, (g + 1) * n))
    for d in range(dn.groups * n, dn.total):
        blocks.append(np.array([n_queries + d]))
    return blocks


def dn_attention_mask(n_queries: int, dn: DnBatch | None) -> np.ndarray:
    """Boolean (T, T) mask of allowed attention pairs, True = may attend."""
    total = n_queries + (dn.total if dn is not None else 0)
    allowed = np.zeros((total, total), dtype=bool)
    for block in attention_blocks(n_queries, dn):
        allowed[np.ix_(block, block)] = True
    return allowed


def _group_topology(topo_logits, dn: DnBatch):
    """Stack each group's slot-by-slot topology block into (G*n, n)."""
    rows = []
    n = int((dn.target >= 0).sum() // dn.groups)
    for g in range(dn.groups):
        idx = np.where(dn.group == g)[0]
        sub = E.take_rows(topo_logits, idx)
        sub = E.transpose(E.take_rows(E.transpose(sub), idx))
        rows.append(sub)
    return E.concat(rows, axis=0), n


def denoise_losses(
    out: dict,
    dn: DnBatch,
    gt: LaneGraph,
    weights: dict | None = None,
) -> dict:
    """Per-term and total denoising losses against the clean ground truth.

    Expects head outputs for the denoising slots: coords (D, 3, M, 3) in
    meters, class_logits (D, 2), type_logits (D, 2, 3), and either
    topo_logits (D, D) or topo_blocks (a per-group list of (n, n) logits).
    """
    w = dict(DN_WEIGHTS)
    if weights:
        w.update(weights)
    idx = dn.used
    zero = E.as_tensor(0.0)
    if len(idx) == 0:
        return {"coord": zero, "cls": zero, "types": zero, "topo": zero, "total": zero}

    gt_coords = np.stack([gt.segments[j].coordinates() for j in dn.target[idx]])
    coord = E.l1_loss(E.take_rows(out["coords"], idx), gt_coords)

    cls_true = np.array([LANE_CLASS_INDEX[gt.segments[j].lane_class] for j in dn.target[idx]])
    onehot = np.zeros((len(idx), len(LANE_CLASS_INDEX)))
    onehot[np.arange(len(idx)), cls_true] = 1.0
    cls = E.focal_loss(E.sigmoid(E.take_rows(out["class_logits"], idx)), onehot)

    type_labels = np.array(
        [
            [BOUNDARY_TYPE_INDEX[gt.segments[j].left_type], BOUNDARY_TYPE_INDEX[gt.segments[j].right_type]]
            for j in dn.target[idx]
        ]
    ).reshape(-1)
    type_logits = E.reshape(E.take_rows(out["type_logits"], idx), (2 * len(idx), -1))
    types = E.cross_entropy(type_logits, type_labels)

    if "topo_blocks" in out:
        stacked = E.concat(list(out["topo_blocks"]), axis=0)
    else:
        stacked, _ = _group_topology(out["topo_logits"], dn)
    topo_target = np.tile(gt.adjacency, (dn.groups, 1))
    topo = E.focal_loss(E.sigmoid(stacked), topo_target)

    total = E.add(
        E.add(E.mul(coord, w["coord"]), E.mul(cls, w["cls"])),
        E.add(E.mul(types, w["types"]), E.mul(topo, w["topo"])),
    )
    return {"coord": coord, "cls": cls, "types": types, "topo": topo, "total": total}
