"""Core lane-scene data model: segments, graphs, poses, grids, serialization.

Coordinates are ego-frame meters, x forward, y left, z up. Every polyline
is a fixed-length (NUM_POINTS, 3) float64 array ordered along travel
direction. A lane segment bundles a centerline with its left and right
boundary polylines plus class and boundary-type labels.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

NUM_POINTS = 10  # points per polyline, fixed across the whole pipeline

LANE_CLASSES = ("road_line", "pedestrian_crossing")
BOUNDARY_TYPES = ("non_visible", "solid", "dashed")

LANE_CLASS_INDEX = {name: i for i, name in enumerate(LANE_CLASSES)}
BOUNDARY_TYPE_INDEX = {name: i for i, name in enumerate(BOUNDARY_TYPES)}


def _as_polyline(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        raise ValueError("empty polyline")
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"polyline must be (N, 3), got {pts.shape}")
    return pts


@dataclass
class LaneSegment:
    """One lane segment: centerline plus left/right boundaries and labels."""

    centerline: np.ndarray
    left: np.ndarray
    right: np.ndarray
    lane_class: str = "road_line"
    left_type: str = "non_visible"
    right_type: str = "non_visible"
    instance_id: int | None = None
    confidence: float | None = None

    def __post_init__(self):
        self.centerline = _as_polyline(self.centerline)
        self.left = _as_polyline(self.left)
        self.right = _as_polyline(self.right)
        if self.lane_class not in LANE_CLASS_INDEX:
            raise ValueError(f"unknown lane_class {self.lane_class!r}")
        for t in (self.left_type, self.right_type):
            if t not in BOUNDARY_TYPE_INDEX:
                raise ValueError(f"unknown boundary type {t!r}")

    def coordinates(self) -> np.ndarray:
        """Stacked (3, M, 3) array: centerline, left, right."""
        return np.stack([self.centerline, self.left, self.right])

    def transformed(self, psi: "Pose") -> "LaneSegment":
        return LaneSegment(
            centerline=apply_transform(psi, self.centerline),
            left=apply_transform(psi, self.left),
            right=apply_transform(psi, self.right),
            lane_class=self.lane_class,
            left_type=self.left_type,
            right_type=self.right_type,
            instance_id=self.instance_id,
            confidence=self.confidence,
        )


@dataclass
class LaneGraph:
    """Lane segments plus a dense directed successor adjacency matrix.

    adjacency[i, j] says segment j succeeds segment i: binary for ground
    truth, a score in [0, 1] for predictions.
    """

    segments: list[LaneSegment]
    adjacency: np.ndarray

    def __post_init__(self):
        n = len(self.segments)
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        if self.adjacency.shape != (n, n):
            raise ValueError(
                f"adjacency must be ({n}, {n}), got {self.adjacency.shape}"
            )
        ids = [s.instance_id for s in self.segments if s.instance_id is not None]
        if len(ids) != len(set(ids)):
            raise ValueError("non-unique GT ids")

    def instance_ids(self) -> list[int | None]:
        return [s.instance_id for s in self.segments]

    def __len__(self):
        return len(self.segments)


@dataclass
class Pose:
    """Rigid transform: p_out = rotation @ p_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3):
            raise ValueError(f"rotation must be (3, 3), got {self.rotation.shape}")
        if self.translation.shape != (3,):
            raise ValueError(
                f"translation must be (3,), got {self.translation.shape}"
            )

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_yaw(yaw: float, translation) -> "Pose":
        c, s = np.cos(yaw), np.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return Pose(rot, np.asarray(translation, dtype=np.float64))

    def inverse(self) -> "Pose":
        rot_t = self.rotation.T
        return Pose(rot_t, -rot_t @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """Transform equal to applying `other` first, then `self`."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def flat(self) -> np.ndarray:
        """Top 3x4 [R | t] row-major, 12 values."""
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1).ravel()


def relative_transform(pose_prev: Pose, pose_curr: Pose) -> Pose:
    """Rigid transform mapping prev-ego coordinates into curr-ego coordinates.

    Poses map ego coordinates into the shared global frame.
    """
    return pose_curr.inverse().compose(pose_prev)


def apply_transform(psi: Pose, points: np.ndarray) -> np.ndarray:
    """Apply a rigid transform to an (..., 3) array of points."""
    pts = np.asarray(points, dtype=np.float64)
    return pts @ psi.rotation.T + psi.translation


@dataclass
class BEVGridSpec:
    """BEV raster layout over the ego-centric perception window.

    Rows sweep x in [-x_range, x_range] (forward), columns sweep y in
    [-y_range, y_range] (left). The z band only matters for coordinate
    normalization, nothing is rasterized along z.
    """

    height_cells: int = 200
    width_cells: int = 100
    x_range: float = 50.0
    y_range: float = 25.0
    z_range: float = 5.0
    channels: int = 32

    def cell_size(self) -> tuple[float, float]:
        return (
            2.0 * self.x_range / self.height_cells,
            2.0 * self.y_range / self.width_cells,
        )

    def cell_centers(self) -> np.ndarray:
        """(H, W, 2) array of (x, y) cell-center coordinates in meters."""
        dx, dy = self.cell_size()
        xs = -self.x_range + (np.arange(self.height_cells) + 0.5) * dx
        ys = -self.y_range + (np.arange(self.width_cells) + 0.5) * dy
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx, gy], axis=-1)


def normalize_coords(points: np.ndarray, spec: BEVGridSpec) -> np.ndarray:
    """Map ego-frame meters into the unit cube spanned by the grid window."""
    pts = np.asarray(points, dtype=np.float64)
    scale = np.array([2.0 * spec.x_range, 2.0 * spec.y_range, 2.0 * spec.z_range])
    shift = np.array([spec.x_range, spec.y_range, spec.z_range])
    return (pts + shift) / scale


def denormalize_coords(points: np.ndarray, spec: BEVGridSpec) -> np.ndarray:
    """Inverse of normalize_coords."""
    pts = np.asarray(points, dtype=np.float64)
    scale = np.array([2.0 * spec.x_range, 2.0 * spec.y_range, 2.0 * spec.z_range])
    shift = np.array([spec.x_range, spec.y_range, spec.z_range])
    return pts * scale - shift


@dataclass
class FrameSample:
    """One observation: ego pose, ground-truth lane graph, optional BEV raster."""

    timestamp: float
    pose: Pose
    gt: LaneGraph
    bev_features: np.ndarray | None = field(default=None, repr=False)


def segment_to_json(seg: LaneSegment) -> dict:
    out = {
        "coordinates": seg.coordinates().tolist(),
        "lane_class": seg.lane_class,
        "left_type": seg.left_type,
        "right_type": seg.right_type,
        "instance_id": seg.instance_id,
    }
    if seg.confidence is not None:
        out["confidence"] = seg.confidence
    return out


def segment_from_json(obj: dict) -> LaneSegment:
    coords = np.asarray(obj["coordinates"], dtype=np.float64)
    if coords.ndim != 3 or coords.shape[0] != 3 or coords.shape[2] != 3:
        raise ValueError(f"segment coordinates must be (3, M, 3), got {coords.shape}")
    return LaneSegment(
        centerline=coords[0],
        left=coords[1],
        right=coords[2],
        lane_class=obj["lane_class"],
        left_type=obj["left_type"],
        right_type=obj["right_type"],
        instance_id=obj.get("instance_id"),
        confidence=obj.get("confidence"),
    )


def sequence_to_json(frames: list[FrameSample], meta: dict | None = None) -> dict:
    doc = {"meta": meta or {}, "frames": []}
    for f in frames:
        doc["frames"].append(
            {
                "timestamp": f.timestamp,
                "pose": {
                    "rotation": f.pose.rotation.tolist(),
                    "translation": f.pose.translation.tolist(),
                },
                "segments": [segment_to_json(s) for s in f.gt.segments],
                "adjacency": f.gt.adjacency.tolist(),
            }
        )
    return doc


def sequence_from_json(doc: dict) -> list[FrameSample]:
    frames = []
    for fr in doc["frames"]:
        pose = Pose(fr["pose"]["rotation"], fr["pose"]["translation"])
        segments = [segment_from_json(s) for s in fr["segments"]]
        graph = LaneGraph(segments, np.asarray(fr["adjacency"], dtype=np.float64))
        frames.append(FrameSample(float(fr["timestamp"]), pose, graph))
    return frames


def write_json_atomic(obj, path: str, indent: int | None = None) -> None:
    """Serialize to a temp file in the target directory, then rename over."""
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=indent, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def save_sequence(frames: list[FrameSample], path: str, meta: dict | None = None) -> None:
    write_json_atomic(sequence_to_json(frames, meta), path)


def load_sequence(path: str) -> list[FrameSample]:
    with open(path) as fh:
        return sequence_from_json(json.load(fh))


def load_sequence_meta(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh).get("meta", {})
