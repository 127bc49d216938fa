"""Synthetic lane-graph scenes: road templates, ego motion, BEV rendering.

A scenario builds a global lane network (dense polylines plus successor
adjacency), drives an ego along the base path, and emits one FrameSample
per step: the network clipped to the ego-centric perception window with
instance ids preserved, plus a rasterized BEV feature grid.

BEV channel layout (first 11 of grid.channels):
  0     centerline occupancy
  1-3   left boundary occupancy split by type (non_visible, solid, dashed)
  4-6   right boundary occupancy split by type
  7     road_line region mask
  8     pedestrian_crossing region mask
  9-10  normalized cell-center x and y (noise-free positional pair)
Channels 0-8 receive additive Gaussian noise of scale noise_sigma.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .core import (
    BEVGridSpec,
    BOUNDARY_TYPE_INDEX,
    FrameSample,
    LaneGraph,
    LaneSegment,
    NUM_POINTS,
    Pose,
    apply_transform,
    load_sequence,
    load_sequence_meta,
)
from .geometry import resample_polyline

TEMPLATES = (
    "straight",
    "lane_split",
    "lane_merge",
    "intersection",
    "pedestrian_crossing_mix",
)

_DENSE_STEP = 1.0  # meters between dense polyline samples
_CROSSING_HALF_WIDTH = 1.5


@dataclass
class ScenarioSpec:
    template: str = "straight"
    n_lanes: int = 3
    lane_width: float = 3.5
    frames: int = 20
    speed: float = 5.0  # meters of ego travel per frame
    curvature: float = 0.0  # max |kappa| of the base path, sampled per scenario
    seed: int = 0
    noise_sigma: float = 0.0
    chunk_length: float = 20.0
    start_offset: float = 10.0
    grid: BEVGridSpec = field(default_factory=BEVGridSpec)

    def __post_init__(self):
        if self.template not in TEMPLATES:
            raise ValueError(f"unknown template {self.template!r}")


@dataclass
class _GlobalSegment:
    centerline: np.ndarray
    left: np.ndarray
    right: np.ndarray
    lane_class: str
    left_type: str
    right_type: str
    instance_id: int


class _BasePath:
    """Constant-curvature reference path starting at the origin along +x."""

    def __init__(self, curvature: float):
        self.k = float(curvature)

    def point(self, s):
        s = np.asarray(s, dtype=np.float64)
        if abs(self.k) < 1e-9:
            x, y = s, np.zeros_like(s)
        else:
            x = np.sin(self.k * s) / self.k
            y = (1.0 - np.cos(self.k * s)) / self.k
        return np.stack([x, y, np.zeros_like(s)], axis=-1)

    def yaw(self, s):
        return self.k * np.asarray(s, dtype=np.float64)

    def normal(self, s):
        yaw = self.yaw(s)
        return np.stack([-np.sin(yaw), np.cos(yaw), np.zeros_like(yaw)], axis=-1)

    def tangent(self, s):
        yaw = self.yaw(s)
        return np.stack([np.cos(yaw), np.sin(yaw), np.zeros_like(yaw)], axis=-1)


def _offset_polyline(path: _BasePath, s: np.ndarray, lateral) -> np.ndarray:
    lat = lateral(s) if callable(lateral) else np.full_like(s, float(lateral))
    return path.point(s) + path.normal(s) * lat[:, None]


def _pick_types(rng) -> tuple[str, str]:
    choices = ("solid", "dashed", "non_visible")
    probs = (0.4, 0.4, 0.2)
    return (
        str(rng.choice(choices, p=probs)),
        str(rng.choice(choices, p=probs)),
    )


def _chunk_types(rng, prev=None) -> tuple[str, str]:
    """Boundary types for one chunk, never repeating the previous pair.

    A style change at every chunk border keeps segment extents readable
    from the boundary-type channels; without it consecutive chunks of a
    lane render as one unbroken line.
    """
    pair = _pick_types(rng)
    while pair == prev:
        pair = _pick_types(rng)
    return pair


class _NetworkBuilder:
    def __init__(self):
        self.segments: list[_GlobalSegment] = []
        self.edges: list[tuple[int, int]] = []

    def add(self, centerline, left, right, lane_class, left_type, right_type) -> int:
        iid = len(self.segments)
        self.segments.append(
            _GlobalSegment(centerline, left, right, lane_class, left_type, right_type, iid)
        )
        return iid

    def chain(self, ids: list[int]):
        for a, b in zip(ids, ids[1:]):
            self.edges.append((a, b))

    def connect(self, a: int, b: int):
        self.edges.append((a, b))

    def adjacency(self) -> np.ndarray:
        n = len(self.segments)
        adj = np.zeros((n, n))
        for a, b in self.edges:
            adj[a, b] = 1.0
        return adj


def _add_lane_chunks(builder, path, rng, s_end, lateral, width, s_start=0.0, chunk=20.0):
    """One lane split into consecutive chunks; returns the chunk ids in order."""
    half = 0.5 * width
    types = None
    ids = []
    edges = np.arange(s_start, s_end - 1e-9, chunk)
    for s0 in edges:
        s1 = min(s0 + chunk, s_end)
        s = np.arange(s0, s1 + _DENSE_STEP / 2, _DENSE_STEP)
        if len(s) < 2:
            continue
        lat = lateral if callable(lateral) else (lambda q, v=float(lateral): np.full_like(q, v))
        center = _offset_polyline(path, s, lat)
        left = _offset_polyline(path, s, lambda q: lat(q) + half)
        right = _offset_polyline(path, s, lambda q: lat(q) - half)
        types = _chunk_types(rng, types)
        ids.append(builder.add(center, left, right, "road_line", *types))
    builder.chain(ids)
    return ids


def _lane_offsets(n_lanes: int, width: float) -> np.ndarray:
    return (np.arange(n_lanes) - (n_lanes - 1) / 2.0) * width


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _build_straight(spec, path, rng, length):
    b = _NetworkBuilder()
    for off in _lane_offsets(spec.n_lanes, spec.lane_width):
        _add_lane_chunks(b, path, rng, length, off, spec.lane_width, chunk=spec.chunk_length)
    return b


def _build_split(spec, path, rng, length):
    b = _NetworkBuilder()
    s_fork = length * 0.5
    ramp = spec.chunk_length  # lateral transition length after the fork
    for off in _lane_offsets(max(spec.n_lanes - 1, 1), spec.lane_width):
        trunk = _add_lane_chunks(
            b, path, rng, s_fork, off, spec.lane_width, chunk=spec.chunk_length
        )
        if abs(off - _lane_offsets(max(spec.n_lanes - 1, 1), spec.lane_width)[-1]) < 1e-9:
            # outermost lane forks: one branch continues, one ramps outward
            for sign in (0.0, +1.0):
                def lat(q, o=off, sg=sign):
                    blend = _smoothstep((q - s_fork) / ramp)
                    return o + sg * spec.lane_width * blend

                branch = _add_lane_chunks(
                    b, path, rng, length, lat, spec.lane_width,
                    s_start=s_fork, chunk=spec.chunk_length,
                )
                if trunk and branch:
                    b.connect(trunk[-1], branch[0])
        else:
            tail = _add_lane_chunks(
                b, path, rng, length, off, spec.lane_width,
                s_start=s_fork, chunk=spec.chunk_length,
            )
            if trunk and tail:
                b.connect(trunk[-1], tail[0])
    return b


def _build_merge(spec, path, rng, length):
    b = _NetworkBuilder()
    s_join = length * 0.5
    ramp = spec.chunk_length
    offs = _lane_offsets(max(spec.n_lanes - 1, 1), spec.lane_width)
    for off in offs:
        if abs(off - offs[-1]) < 1e-9:
            merged = _add_lane_chunks(
                b, path, rng, length, off, spec.lane_width,
                s_start=s_join, chunk=spec.chunk_length,
            )
            for sign in (0.0, +1.0):
                def lat(q, o=off, sg=sign):
                    blend = _smoothstep((s_join - q) / ramp)
                    return o + sg * spec.lane_width * blend

                feeder = _add_lane_chunks(
                    b, path, rng, s_join, lat, spec.lane_width, chunk=spec.chunk_length
                )
                if feeder and merged:
                    b.connect(feeder[-1], merged[0])
        else:
            head = _add_lane_chunks(b, path, rng, s_join, off, spec.lane_width, chunk=spec.chunk_length)
            tail = _add_lane_chunks(
                b, path, rng, length, off, spec.lane_width,
                s_start=s_join, chunk=spec.chunk_length,
            )
            if head and tail:
                b.connect(head[-1], tail[0])
    return b


def _cross_road_lane(builder, rng, x_lane, half, half_road, chunk, southbound):
    """One lane of the crossing road, chunked and split at the junction box."""
    types = None
    legs = [(-60.0, -half_road), (half_road, 60.0)]
    if southbound:
        legs = legs[::-1]
    ids = []
    for lo, hi in legs:
        leg_ids = []
        for y0 in np.arange(lo, hi - 1e-9, chunk):
            y1 = min(y0 + chunk, hi)
            ys = np.arange(y0, y1 + _DENSE_STEP / 2, _DENSE_STEP)
            if southbound:
                ys = ys[::-1]
            center = np.stack([np.full_like(ys, x_lane), ys, np.zeros_like(ys)], axis=1)
            # left boundary relative to travel direction
            side = np.array([half if southbound else -half, 0.0, 0.0])
            types = _chunk_types(rng, types)
            leg_ids.append(
                builder.add(center, center + side, center - side, "road_line", *types)
            )
        if southbound:
            leg_ids = leg_ids[::-1]  # created in ascending y, travel is -y
        ids.extend(leg_ids)
    builder.chain(ids)
    return ids


def _build_intersection(spec, path, rng, length):
    b = _build_straight(spec, path, rng, length)
    x_cross = spec.start_offset + 0.5 * spec.frames * spec.speed
    half_road = 0.5 * spec.n_lanes * spec.lane_width + 2.0
    half = 0.5 * spec.lane_width
    south_off, north_off = _lane_offsets(2, spec.lane_width)
    south_ids = _cross_road_lane(
        b, rng, x_cross + south_off, half, half_road, spec.chunk_length, southbound=True
    )
    _cross_road_lane(
        b, rng, x_cross + north_off, half, half_road, spec.chunk_length, southbound=False
    )
    # right-turn connector: rightmost main lane onto the southbound lane
    main_off = _lane_offsets(spec.n_lanes, spec.lane_width)[0]
    radius = half_road + south_off + 4.0
    cx, cy = x_cross + south_off - radius, main_off - radius
    phi = np.linspace(0.0, np.pi / 2, 24)
    arc = np.stack(
        [cx + radius * np.sin(phi), cy + radius * np.cos(phi), np.zeros_like(phi)], axis=1
    )
    tang = np.gradient(arc, axis=0)
    tang /= np.linalg.norm(tang[:, :2], axis=1, keepdims=True) + 1e-12
    normal = np.stack([-tang[:, 1], tang[:, 0], np.zeros_like(phi)], axis=1)
    conn = b.add(arc, arc + half * normal, arc - half * normal, "road_line", "dashed", "dashed")
    main_chunks = [
        (g.centerline[-1, 0], i)
        for i, g in enumerate(b.segments)
        if abs(g.centerline[-1, 1] - main_off) < 1e-6 and abs(g.centerline[0, 1] - main_off) < 1e-6
    ]
    feeders = sorted((e, i) for e, i in main_chunks if e >= cx - 1e-9)
    if feeders:
        b.connect(feeders[0][1], conn)
    exits = [i for i in south_ids if b.segments[i].centerline[0, 1] <= -half_road + 1e-9]
    if exits:
        b.connect(conn, max(exits, key=lambda i: b.segments[i].centerline[0, 1]))
    return b


def _build_crossing_mix(spec, path, rng, length):
    b = _build_straight(spec, path, rng, length)
    half_road = 0.5 * spec.n_lanes * spec.lane_width + 1.0
    n_crossings = int(rng.integers(2, 5))
    positions = spec.start_offset + (np.arange(n_crossings) + 0.7) * (
        spec.frames * spec.speed / (n_crossings + 0.5)
    )
    for s_c in positions:
        t = np.arange(-half_road, half_road + _DENSE_STEP / 2, _DENSE_STEP)
        base_pt = path.point(np.array([s_c]))[0]
        normal = path.normal(np.array([s_c]))[0]
        tangent = path.tangent(np.array([s_c]))[0]
        center = base_pt[None, :] + normal[None, :] * t[:, None]
        left = center - tangent[None, :] * _CROSSING_HALF_WIDTH
        right = center + tangent[None, :] * _CROSSING_HALF_WIDTH
        b.add(center, left, right, "pedestrian_crossing", "non_visible", "non_visible")
    return b


_BUILDERS = {
    "straight": _build_straight,
    "lane_split": _build_split,
    "lane_merge": _build_merge,
    "intersection": _build_intersection,
    "pedestrian_crossing_mix": _build_crossing_mix,
}


def build_network(spec: ScenarioSpec) -> tuple[list[_GlobalSegment], np.ndarray, _BasePath]:
    """Construct the global lane network and base path for a scenario."""
    rng = np.random.default_rng(spec.seed)
    if spec.template in ("intersection",):
        curvature = 0.0
    else:
        curvature = float(rng.uniform(-spec.curvature, spec.curvature)) if spec.curvature else 0.0
    path = _BasePath(curvature)
    length = spec.start_offset + spec.frames * spec.speed + spec.grid.x_range + 20.0
    builder = _BUILDERS[spec.template](spec, path, rng, length)
    return builder.segments, builder.adjacency(), path


def ego_pose(path: _BasePath, s: float) -> Pose:
    return Pose.from_yaw(float(path.yaw(np.float64(s))), path.point(np.float64(s)))


def _longest_inside_run(inside: np.ndarray) -> tuple[int, int] | None:
    best, cur_start, best_len = None, None, 0
    for i, flag in enumerate(inside):
        if flag and cur_start is None:
            cur_start = i
        if (not flag or i == len(inside) - 1) and cur_start is not None:
            end = i if flag else i - 1
            if end - cur_start + 1 > best_len:
                best, best_len = (cur_start, end), end - cur_start + 1
            cur_start = None
    return best if best_len >= 2 else None


def clip_to_window(
    segments: list[_GlobalSegment],
    adjacency: np.ndarray,
    pose: Pose,
    grid: BEVGridSpec,
) -> LaneGraph:
    """Clip the global network into the ego window, keeping instance ids.

    A segment survives when at least two consecutive dense centerline
    points fall inside the window; its polylines are resampled over the
    surviving span.
    """
    inv = pose.inverse()
    kept, kept_ids = [], []
    for gs in segments:
        c = apply_transform(inv, gs.centerline)
        inside = (np.abs(c[:, 0]) <= grid.x_range) & (np.abs(c[:, 1]) <= grid.y_range)
        run = _longest_inside_run(inside)
        if run is None:
            continue
        i0, i1 = run
        sl = slice(i0, i1 + 1)
        kept.append(
            LaneSegment(
                resample_polyline(c[sl], NUM_POINTS),
                resample_polyline(apply_transform(inv, gs.left)[sl], NUM_POINTS),
                resample_polyline(apply_transform(inv, gs.right)[sl], NUM_POINTS),
                lane_class=gs.lane_class,
                left_type=gs.left_type,
                right_type=gs.right_type,
                instance_id=gs.instance_id,
            )
        )
        kept_ids.append(gs.instance_id)
    idx = np.array(kept_ids, dtype=int)
    sub = adjacency[np.ix_(idx, idx)] if len(idx) else np.zeros((0, 0))
    return LaneGraph(kept, sub)


def render_rng(seed: int, frame_idx: int) -> np.random.Generator:
    """Deterministic per-frame noise stream."""
    return np.random.default_rng([int(seed) & 0x7FFFFFFF, 104729, int(frame_idx)])


def _mark_polyline(channel: np.ndarray, pts: np.ndarray, grid: BEVGridSpec):
    dx, dy = grid.cell_size()
    step = 0.5 * min(dx, dy)
    dense = [pts]
    seg_len = np.linalg.norm(np.diff(pts[:, :2], axis=0), axis=1)
    for i, L in enumerate(seg_len):
        if L > step:
            n = int(np.ceil(L / step))
            alphas = np.linspace(0.0, 1.0, n + 1)[1:-1, None]
            dense.append(pts[i] * (1 - alphas) + pts[i + 1] * alphas)
    allpts = np.concatenate(dense, axis=0)
    xi = np.floor((allpts[:, 0] + grid.x_range) / dx).astype(int)
    yi = np.floor((allpts[:, 1] + grid.y_range) / dy).astype(int)
    ok = (xi >= 0) & (xi < grid.height_cells) & (yi >= 0) & (yi < grid.width_cells)
    channel[xi[ok], yi[ok]] = 1.0


def fill_polygon(vertices: np.ndarray, grid: BEVGridSpec) -> np.ndarray:
    """Even-odd rasterization of a polygon over cell centers, bool (H, W)."""
    out = np.zeros((grid.height_cells, grid.width_cells), dtype=bool)
    if len(vertices) < 3:
        return out
    dx, dy = grid.cell_size()
    vx, vy = vertices[:, 0], vertices[:, 1]
    i0 = max(int(np.floor((vx.min() + grid.x_range) / dx)), 0)
    i1 = min(int(np.floor((vx.max() + grid.x_range) / dx)), grid.height_cells - 1)
    j0 = max(int(np.floor((vy.min() + grid.y_range) / dy)), 0)
    j1 = min(int(np.floor((vy.max() + grid.y_range) / dy)), grid.width_cells - 1)
    if i1 < i0 or j1 < j0:
        return out
    px = -grid.x_range + (np.arange(i0, i1 + 1) + 0.5) * dx
    py = -grid.y_range + (np.arange(j0, j1 + 1) + 0.5) * dy
    PX, PY = np.meshgrid(px, py, indexing="ij")
    inside = np.zeros_like(PX, dtype=bool)
    n = len(vertices)
    for k in range(n):
        x1, y1 = vx[k], vy[k]
        x2, y2 = vx[(k + 1) % n], vy[(k + 1) % n]
        if y1 == y2:
            continue
        crosses = (y1 > PY) != (y2 > PY)
        xs = (x2 - x1) * (PY - y1) / (y2 - y1) + x1
        inside ^= crosses & (PX < xs)
    out[i0 : i1 + 1, j0 : j1 + 1] = inside
    return out


def instance_region_mask(segment: LaneSegment, grid: BEVGridSpec) -> np.ndarray:
    """Binary BEV mask of the ribbon between left and right boundaries."""
    poly = np.concatenate([segment.left[:, :2], segment.right[::-1, :2]], axis=0)
    return fill_polygon(poly, grid)


def render_bev(
    graph: LaneGraph,
    grid: BEVGridSpec,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Rasterize a lane graph into an (H, W, C) float64 feature grid."""
    if grid.channels < 11:
        raise ValueError(f"renderer needs at least 11 channels, got {grid.channels}")
    H, W = grid.height_cells, grid.width_cells
    bev = np.zeros((H, W, grid.channels))
    for seg in graph.segments:
        _mark_polyline(bev[:, :, 0], seg.centerline, grid)
        _mark_polyline(bev[:, :, 1 + BOUNDARY_TYPE_INDEX[seg.left_type]], seg.left, grid)
        _mark_polyline(bev[:, :, 4 + BOUNDARY_TYPE_INDEX[seg.right_type]], seg.right, grid)
        region = instance_region_mask(seg, grid)
        cls_channel = 7 if seg.lane_class == "road_line" else 8
        bev[:, :, cls_channel][region] = 1.0
    if noise_sigma > 0.0:
        rng = rng or np.random.default_rng(0)
        bev[:, :, :9] += rng.normal(0.0, noise_sigma, size=(H, W, 9))
    centers = grid.cell_centers()
    bev[:, :, 9] = (centers[:, :, 0] + grid.x_range) / (2 * grid.x_range)
    bev[:, :, 10] = (centers[:, :, 1] + grid.y_range) / (2 * grid.y_range)
    return bev


def generate_sequence(spec: ScenarioSpec, render: bool = True) -> list[FrameSample]:
    """Drive the ego through the scenario and emit per-frame samples."""
    segments, adjacency, path = build_network(spec)
    frames = []
    for t in range(spec.frames):
        pose = ego_pose(path, spec.start_offset + t * spec.speed)
        graph = clip_to_window(segments, adjacency, pose, spec.grid)
        bev = None
        if render:
            bev = render_bev(graph, spec.grid, spec.noise_sigma, render_rng(spec.seed, t))
        frames.append(FrameSample(float(t), pose, graph, bev))
    return frames


def scenario_meta(spec: ScenarioSpec) -> dict:
    return {
        "template": spec.template,
        "n_lanes": spec.n_lanes,
        "lane_width": spec.lane_width,
        "frames": spec.frames,
        "speed": spec.speed,
        "curvature": spec.curvature,
        "seed": spec.seed,
        "noise_sigma": spec.noise_sigma,
        "chunk_length": spec.chunk_length,
        "start_offset": spec.start_offset,
        "grid": dataclasses.asdict(spec.grid),
    }


def grid_from_meta(meta: dict) -> BEVGridSpec:
    return BEVGridSpec(**meta["grid"])


def load_rendered_sequence(path: str) -> list[FrameSample]:
    """Load a saved sequence and re-render its BEV rasters from its meta.

    Rendering is a pure function of the stored geometry, the grid, and the
    per-frame noise stream, so loaded rasters match generated ones exactly.
    """
    meta = load_sequence_meta(path)
    for key in ("grid", "seed", "noise_sigma"):
        if key not in meta:
            raise ValueError(f"{path}: meta is missing field {key!r}")
    grid = grid_from_meta(meta)
    frames = load_sequence(path)
    for t, frame in enumerate(frames):
        frame.bev_features = render_bev(
            frame.gt, grid, meta["noise_sigma"], render_rng(meta["seed"], t)
        )
    return frames
