"""Figure rendering: precision-recall curves, BEV lane-graph overlays,
ablation bars. Everything is written as SVG with a fixed hash salt and no
date metadata so reruns produce identical bytes.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core import BEVGridSpec, LaneGraph  # noqa: E402
from .evaluation import DETECTION_THRESHOLDS, pr_curve  # noqa: E402

plt.rcParams["svg.hashsalt"] = "lanestream"

CLASS_COLORS = {"road_line": "tab:blue", "pedestrian_crossing": "tab:orange"}
TYPE_STYLES = {"non_visible": ":", "solid": "-", "dashed": "--"}
_SAVE_KW = {"format": "svg", "metadata": {"Date": None}}


def save_pr_curves(
    preds: list[LaneGraph],
    gts: list[LaneGraph],
    path: str,
    thresholds=DETECTION_THRESHOLDS,
    kind: str = "frechet",
) -> str:
    """One precision-recall curve per distance threshold."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for thr in thresholds:
        recall, precision = pr_curve(preds, gts, kind=kind, threshold=thr)
        if recall.size == 0:
            continue
        ax.plot(recall, precision, label=f"{kind} @ {thr:g} m")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def _draw_graph(ax, graph: LaneGraph, alpha: float, lw: float, gray: bool):
    for seg in graph.segments:
        color = "0.6" if gray else CLASS_COLORS[seg.lane_class]
        # ego frame: x forward is drawn up, y left is drawn left
        ax.plot(-seg.centerline[:, 1], seg.centerline[:, 0], color=color, alpha=alpha, lw=lw)
        for pts, btype in ((seg.left, seg.left_type), (seg.right, seg.right_type)):
            ax.plot(
                -pts[:, 1],
                pts[:, 0],
                TYPE_STYLES[btype],
                color=color,
                alpha=0.6 * alpha,
                lw=0.8 * lw,
            )
    n = len(graph)
    for i in range(n):
        for j in range(n):
            if graph.adjacency[i, j] <= 0.5 or i == j:
                continue
            a = graph.segments[i].centerline[-1]
            b = graph.segments[j].centerline[0]
            ax.annotate(
                "",
                xy=(-b[1], b[0]),
                xytext=(-a[1], a[0]),
                arrowprops={"arrowstyle": "->", "color": "0.3" if gray else "tab:green", "lw": 0.7},
            )


def save_lane_graph(
    graph: LaneGraph,
    path: str,
    grid: BEVGridSpec | None = None,
    gt: LaneGraph | None = None,
    title: str | None = None,
) -> str:
    """BEV overlay of a lane graph, optionally against gray ground truth."""
    fig, ax = plt.subplots(figsize=(4, 6))
    if gt is not None:
        _draw_graph(ax, gt, alpha=0.8, lw=2.2, gray=True)
    _draw_graph(ax, graph, alpha=0.9, lw=1.2, gray=False)
    if grid is not None:
        ax.plot(
            [-grid.y_range, grid.y_range, grid.y_range, -grid.y_range, -grid.y_range],
            [-grid.x_range, -grid.x_range, grid.x_range, grid.x_range, -grid.x_range],
            color="0.8",
            lw=0.8,
        )
    ax.set_aspect("equal")
    ax.set_xlabel("right (m)")
    ax.set_ylabel("forward (m)")
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def save_ablation_bars(rows: list, path: str) -> str:
    """Grouped bars of median mAP and boundary accuracy per variant."""
    names = [r["variant"] for r in rows]
    keys = ("map", "acc_b")
    labels = ("mAP", "Acc_b")
    x = np.arange(len(names))
    width = 0.38
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for k, (key, label) in enumerate(zip(keys, labels)):
        vals = [r[key] if r[key] is not None else 0.0 for r in rows]
        ax.bar(x + (k - 0.5) * width, vals, width, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels(names, fontsize=8)
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, axis="y", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path
