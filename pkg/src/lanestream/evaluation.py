"""Lane-graph evaluation: detection AP, topology AP, boundary accuracy.

Predictions and ground truth are lists of LaneGraph, one per frame.
Detection AP ranks predictions by confidence across frames and greedily
matches each to the nearest unmatched same-frame GT within a distance
threshold; the final number is the all-points interpolated area under
the precision-recall curve. Topology quality is a vertex-wise AP of
predicted successor edges projected onto matched GT vertices.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import LaneGraph
from .geometry import segment_distance_matrix

DETECTION_THRESHOLDS = (1.0, 2.0, 3.0)
DISTANCE_KINDS = ("frechet", "chamfer")
TP_THRESHOLD = 1.5  # meters, Frechet, for topology and boundary scoring


class _DistanceCache:
    """Per-frame pairwise distance matrices, computed once per kind."""

    def __init__(self, preds: list[LaneGraph], gts: list[LaneGraph]):
        if len(preds) != len(gts):
            raise ValueError(
                f"got {len(preds)} prediction frames vs {len(gts)} GT frames"
            )
        self.preds = preds
        self.gts = gts
        self._cache: dict[tuple, np.ndarray] = {}

    def __len__(self):
        return len(self.preds)

    def get(self, frame: int, kind: str, centerline_only: bool) -> np.ndarray:
        key = (frame, kind, centerline_only)
        if key not in self._cache:
            self._cache[key] = segment_distance_matrix(
                self.preds[frame].segments,
                self.gts[frame].segments,
                kind=kind,
                centerline_only=centerline_only,
            )
        return self._cache[key]


def _confidences(graph: LaneGraph) -> np.ndarray:
    vals = []
    for seg in graph.segments:
        if seg.confidence is None:
            raise ValueError("prediction segments must carry a confidence")
        vals.append(seg.confidence)
    return np.asarray(vals, dtype=np.float64)


def _greedy_match(dist: np.ndarray, conf: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    """Confidence-ordered greedy TP matching within one frame."""
    n, m = dist.shape
    order = np.lexsort((np.arange(n), -conf))
    taken = np.zeros(m, dtype=bool)
    pairs = []
    for i in order:
        if m == 0:
            break
        d = np.where(taken, np.inf, dist[i])
        j = int(np.argmin(d))
        if d[j] <= threshold:
            taken[j] = True
            pairs.append((int(i), j))
    return pairs


def _interpolated_ap(tp_flags: np.ndarray, total_gt: int) -> float:
    """All-points interpolated area under the precision-recall curve."""
    if total_gt == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / total_gt
    precision = tp / np.maximum(tp + fp, 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    # recall steps are <= ratio 2 apart so each difference is exact; fsum
    # then keeps a perfect ranking at exactly 1.0 regardless of length
    return math.fsum((mrec[1:] - mrec[:-1]) * mpre[1:])


def _ranked_tp_flags(
    cache: _DistanceCache,
    kind: str,
    threshold: float,
    lane_class: str | None = None,
    centerline_only: bool = False,
) -> tuple[np.ndarray, int]:
    """Confidence-ranked true-positive flags and the GT count they cover."""
    ranked = []  # (-conf, frame, local pred idx)
    total_gt = 0
    frame_state = []
    for f in range(len(cache)):
        pred_segs = cache.preds[f].segments
        gt_segs = cache.gts[f].segments
        conf = _confidences(cache.preds[f]) if pred_segs else np.zeros(0)
        if lane_class is None:
            p_idx = np.arange(len(pred_segs))
            g_idx = np.arange(len(gt_segs))
        else:
            p_idx = np.array(
                [i for i, s in enumerate(pred_segs) if s.lane_class == lane_class], dtype=int
            )
            g_idx = np.array(
                [j for j, s in enumerate(gt_segs) if s.lane_class == lane_class], dtype=int
            )
        total_gt += len(g_idx)
        dist = cache.get(f, kind, centerline_only)
        dist = dist[np.ix_(p_idx, g_idx)] if len(pred_segs) and len(gt_segs) else np.zeros((len(p_idx), len(g_idx)))
        frame_state.append({"dist": dist, "taken": np.zeros(len(g_idx), dtype=bool)})
        for local, i in enumerate(p_idx):
            ranked.append((-conf[i], f, local))
    ranked.sort()
    flags = np.zeros(len(ranked), dtype=bool)
    for r, (_, f, local) in enumerate(ranked):
        st = frame_state[f]
        if st["dist"].shape[1] == 0:
            continue
        d = np.where(st["taken"], np.inf, st["dist"][local])
        j = int(np.argmin(d))
        if d[j] <= threshold:
            st["taken"][j] = True
            flags[r] = True
    return flags, total_gt


def average_precision(
    cache: _DistanceCache,
    kind: str,
    threshold: float,
    lane_class: str | None = None,
    centerline_only: bool = False,
) -> float | None:
    """Detection AP at one distance threshold; None when no GT of the class."""
    flags, total_gt = _ranked_tp_flags(cache, kind, threshold, lane_class, centerline_only)
    if total_gt == 0:
        return None
    return _interpolated_ap(flags, total_gt)


def pr_curve(
    preds: list[LaneGraph],
    gts: list[LaneGraph],
    kind: str = "frechet",
    threshold: float = TP_THRESHOLD,
    lane_class: str | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Recall and precision along the confidence ranking at one threshold."""
    flags, total_gt = _ranked_tp_flags(_DistanceCache(preds, gts), kind, threshold, lane_class)
    if total_gt == 0:
        return np.zeros(0), np.zeros(0)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    return tp / total_gt, tp / np.maximum(tp + fp, 1)


def ap_at_thresholds(
    preds: list[LaneGraph],
    gts: list[LaneGraph],
    lane_class: str | None = None,
    thresholds=DETECTION_THRESHOLDS,
    kinds=DISTANCE_KINDS,
    cache: _DistanceCache | None = None,
) -> float | None:
    """AP averaged over distance thresholds and distance kinds."""
    cache = cache or _DistanceCache(preds, gts)
    vals = [
        average_precision(cache, kind, thr, lane_class)
        for kind in kinds
        for thr in thresholds
    ]
    if any(v is None for v in vals):
        return None
    return float(np.mean(vals))


def _vertex_ap(scores: dict[int, float], successors: set[int]) -> float:
    """AP of true successors within the positively scored candidate ranking."""
    ranked = sorted(((-s, w) for w, s in scores.items() if s > 0.0))
    hits, ap = 0, 0.0
    for rank, (_, w) in enumerate(ranked, start=1):
        if w in successors:
            hits += 1
            ap += hits / rank
    return ap / len(successors)


def topology_ap(
    cache: _DistanceCache,
    kind: str = "frechet",
    threshold: float = TP_THRESHOLD,
    centerline_only: bool = False,
) -> float | None:
    """Vertex-wise successor-edge AP over TP-matched lane segments.

    Unmatched GT vertices with successors contribute zero; vertices
    without successors are excluded from the average.
    """
    vertex_aps = []
    for f in range(len(cache)):
        gt = cache.gts[f]
        pred = cache.preds[f]
        if len(gt) == 0:
            continue
        adj = gt.adjacency > 0.5
        with_succ = [u for u in range(len(gt)) if adj[u].any()]
        if not with_succ:
            continue
        dist = cache.get(f, kind, centerline_only)
        conf = _confidences(pred) if len(pred) else np.zeros(0)
        matched = dict()
        if len(pred):
            matched = {g: p for p, g in _greedy_match(dist, conf, threshold)}
        for u in with_succ:
            succ = set(np.nonzero(adj[u])[0].tolist())
            pu = matched.get(u)
            if pu is None:
                vertex_aps.append(0.0)
                continue
            scores = {}
            for w in range(len(gt)):
                if w == u:
                    continue
                pw = matched.get(w)
                scores[w] = float(pred.adjacency[pu, pw]) if pw is not None else 0.0
            vertex_aps.append(_vertex_ap(scores, succ))
    if not vertex_aps:
        return None
    return float(np.mean(vertex_aps))


def top_lsls(preds: list[LaneGraph], gts: list[LaneGraph], threshold: float = TP_THRESHOLD) -> float | None:
    """Successor-topology AP between lane segments (full-segment matching)."""
    return topology_ap(_DistanceCache(preds, gts), "frechet", threshold, centerline_only=False)


def acc_b(
    preds: list[LaneGraph],
    gts: list[LaneGraph],
    threshold: float = TP_THRESHOLD,
    cache: _DistanceCache | None = None,
) -> float:
    """Boundary-type accuracy over TP pairs: left and right each count once."""
    cache = cache or _DistanceCache(preds, gts)
    correct, total = 0, 0
    for f in range(len(cache)):
        pred, gt = cache.preds[f], cache.gts[f]
        if len(pred) == 0 or len(gt) == 0:
            continue
        dist = cache.get(f, "frechet", False)
        pairs = _greedy_match(dist, _confidences(pred), threshold)
        for p, g in pairs:
            ps, gs = pred.segments[p], gt.segments[g]
            correct += int(ps.left_type == gs.left_type)
            correct += int(ps.right_type == gs.right_type)
            total += 2
    return correct / total if total else 0.0


def centerline_eval(
    preds: list[LaneGraph],
    gts: list[LaneGraph],
    thresholds=DETECTION_THRESHOLDS,
    cache: _DistanceCache | None = None,
) -> tuple[float | None, float | None]:
    """Centerline-only detection AP and successor-topology AP."""
    cache = cache or _DistanceCache(preds, gts)
    aps = [
        average_precision(cache, "frechet", thr, centerline_only=True) for thr in thresholds
    ]
    det_l = None if any(v is None for v in aps) else float(np.mean(aps))
    top_ll = topology_ap(cache, "frechet", TP_THRESHOLD, centerline_only=True)
    return det_l, top_ll


def ols(det_l: float | None, top_ll: float | None) -> float | None:
    """Overall lane-centerline score: mean of DET and the square root of TOP."""
    if det_l is None or top_ll is None:
        return None
    return 0.5 * (det_l + float(np.sqrt(top_ll)))


@dataclass
class EvalReport:
    """Every headline metric; absent classes stay None and leave means."""

    ap_ls: float | None = None
    ap_ped: float | None = None
    map: float | None = None
    top_lsls: float | None = None
    acc_b: float | None = None
    det_l: float | None = None
    top_ll: float | None = None
    ols: float | None = None

    def to_dict(self) -> dict:
        return {
            "ap_ls": self.ap_ls,
            "ap_ped": self.ap_ped,
            "map": self.map,
            "top_lsls": self.top_lsls,
            "acc_b": self.acc_b,
            "det_l": self.det_l,
            "top_ll": self.top_ll,
            "ols": self.ols,
        }

    @staticmethod
    def from_dict(d: dict) -> "EvalReport":
        return EvalReport(**{k: d.get(k) for k in EvalReport().to_dict()})


def evaluate(
    preds: list[LaneGraph],
    gts: list[LaneGraph],
    thresholds=DETECTION_THRESHOLDS,
    kinds=DISTANCE_KINDS,
) -> EvalReport:
    """Compute the full report for aligned prediction and GT frame lists."""
    cache = _DistanceCache(preds, gts)
    ap_ls = ap_at_thresholds(preds, gts, "road_line", thresholds, kinds, cache)
    ap_ped = ap_at_thresholds(preds, gts, "pedestrian_crossing", thresholds, kinds, cache)
    present = [v for v in (ap_ls, ap_ped) if v is not None]
    mean_ap = float(np.mean(present)) if present else None
    top = topology_ap(cache)
    det_l, top_ll = centerline_eval(preds, gts, thresholds, cache)
    return EvalReport(
        ap_ls=ap_ls,
        ap_ped=ap_ped,
        map=mean_ap,
        top_lsls=top,
        acc_b=acc_b(preds, gts, cache=cache),
        det_l=det_l,
        top_ll=top_ll,
        ols=ols(det_l, top_ll),
    )


def graph_as_predictions(gt: LaneGraph, confidence: float = 1.0) -> LaneGraph:
    """Copy a GT graph into prediction form with fixed confidence."""
    segs = []
    for s in gt.segments:
        segs.append(
            type(s)(
                centerline=s.centerline.copy(),
                left=s.left.copy(),
                right=s.right.copy(),
                lane_class=s.lane_class,
                left_type=s.left_type,
                right_type=s.right_type,
                instance_id=None,
                confidence=confidence,
            )
        )
    return LaneGraph(segs, gt.adjacency.astype(np.float64).copy())
