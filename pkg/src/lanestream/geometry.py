"""Polyline geometry: discrete Frechet and Chamfer distances, resampling."""
from __future__ import annotations

import numpy as np

from .core import LaneSegment


def _check_curve(pts) -> np.ndarray:
    arr = np.asarray(pts, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty polyline")
    if arr.ndim != 2:
        raise ValueError(f"polyline must be 2-d, got shape {arr.shape}")
    return arr


def _pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def discrete_frechet(a, b) -> float:
    """Discrete Frechet distance between two polylines.

    Dynamic program over the coupling lattice: entry (i, j) holds the
    cheapest achievable maximum pair distance for prefixes a[:i+1], b[:j+1].
    """
    a = _check_curve(a)
    b = _check_curve(b)
    d = _pairwise_distances(a, b)
    n, m = d.shape
    ca = np.empty((n, m))
    ca[0, 0] = d[0, 0]
    for j in range(1, m):
        ca[0, j] = max(ca[0, j - 1], d[0, j])
    for i in range(1, n):
        ca[i, 0] = max(ca[i - 1, 0], d[i, 0])
        row, prev = ca[i], ca[i - 1]
        for j in range(1, m):
            row[j] = max(min(prev[j], prev[j - 1], row[j - 1]), d[i, j])
    return float(ca[-1, -1])


def chamfer(a, b) -> float:
    """Symmetric point-set Chamfer distance.

    Mean nearest-point distance from a to b, averaged with the reverse
    direction.
    """
    a = _check_curve(a)
    b = _check_curve(b)
    d = _pairwise_distances(a, b)
    return float(0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean()))


def resample_polyline(pts, m: int) -> np.ndarray:
    """Resample a polyline to m points uniformly spaced in arclength.

    Endpoints are preserved exactly. A degenerate zero-length polyline
    resamples to m copies of its first point.
    """
    pts = _check_curve(pts)
    if m < 2:
        raise ValueError(f"need at least 2 samples, got {m}")
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1) if len(pts) > 1 else np.zeros(0)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = arc[-1]
    if total <= 0.0:
        return np.repeat(pts[:1], m, axis=0)
    t = np.linspace(0.0, total, m)
    out = np.stack([np.interp(t, arc, pts[:, k]) for k in range(pts.shape[1])], axis=1)
    out[0] = pts[0]
    out[-1] = pts[-1]
    return out


def frechet_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise discrete Frechet distances between polyline batches.

    a is (n, P, D), b is (m, Q, D); returns (n, m). Same dynamic program
    as discrete_frechet, vectorized over all pairs at once.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = a[:, None, :, None, :] - b[None, :, None, :, :]
    d = np.sqrt((diff * diff).sum(axis=-1))  # (n, m, P, Q)
    n, m, P, Q = d.shape
    ca = np.empty_like(d)
    ca[..., 0, 0] = d[..., 0, 0]
    for j in range(1, Q):
        ca[..., 0, j] = np.maximum(ca[..., 0, j - 1], d[..., 0, j])
    for i in range(1, P):
        ca[..., i, 0] = np.maximum(ca[..., i - 1, 0], d[..., i, 0])
        for j in range(1, Q):
            best = np.minimum(
                np.minimum(ca[..., i - 1, j], ca[..., i - 1, j - 1]), ca[..., i, j - 1]
            )
            ca[..., i, j] = np.maximum(best, d[..., i, j])
    return ca[..., P - 1, Q - 1]


def chamfer_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Chamfer distances between polyline batches, (n, m)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = a[:, None, :, None, :] - b[None, :, None, :, :]
    d = np.sqrt((diff * diff).sum(axis=-1))
    return 0.5 * (d.min(axis=3).mean(axis=2) + d.min(axis=2).mean(axis=2))


_POLYLINE_KINDS = {"frechet": discrete_frechet, "chamfer": chamfer}
_MATRIX_KINDS = {"frechet": frechet_matrix, "chamfer": chamfer_matrix}


def segment_distance_matrix(preds, gts, kind: str = "frechet", centerline_only: bool = False) -> np.ndarray:
    """Pairwise segment distances between two lists of lane segments.

    Mean of the three polyline distances, or the centerline distance
    alone when centerline_only is set. Returns (len(preds), len(gts)).
    """
    try:
        fn = _MATRIX_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown distance kind {kind!r}") from None
    if not preds or not gts:
        return np.zeros((len(preds), len(gts)))
    pc = np.stack([s.centerline for s in preds])
    gc = np.stack([s.centerline for s in gts])
    if centerline_only:
        return fn(pc, gc)
    pl = np.stack([s.left for s in preds])
    gl = np.stack([s.left for s in gts])
    pr = np.stack([s.right for s in preds])
    gr = np.stack([s.right for s in gts])
    return (fn(pc, gc) + fn(pl, gl) + fn(pr, gr)) / 3.0


def segment_distance(a: LaneSegment, b: LaneSegment, kind: str = "frechet") -> float:
    """Mean polyline distance over centerline, left and right boundaries."""
    try:
        fn = _POLYLINE_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown distance kind {kind!r}") from None
    return (
        fn(a.centerline, b.centerline) + fn(a.left, b.left) + fn(a.right, b.right)
    ) / 3.0


def centerline_distance(a: LaneSegment, b: LaneSegment, kind: str = "frechet") -> float:
    """Polyline distance on centerlines only."""
    try:
        fn = _POLYLINE_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown distance kind {kind!r}") from None
    return fn(a.centerline, b.centerline)
