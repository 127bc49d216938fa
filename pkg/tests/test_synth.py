import numpy as np
import pytest

from lanestream.core import BEVGridSpec, LaneGraph, LaneSegment, NUM_POINTS
from lanestream.evaluation import evaluate, graph_as_predictions
from lanestream.synth import (
    ScenarioSpec,
    TEMPLATES,
    build_network,
    clip_to_window,
    ego_pose,
    fill_polygon,
    generate_sequence,
    instance_region_mask,
    render_bev,
    render_rng,
)

SMALL_GRID = BEVGridSpec(height_cells=100, width_cells=50, channels=12)


def small_spec(**kw):
    kw.setdefault("grid", SMALL_GRID)
    kw.setdefault("frames", 4)
    return ScenarioSpec(**kw)


@pytest.mark.parametrize("template", TEMPLATES)
def test_templates_generate(template):
    frames = generate_sequence(small_spec(template=template, seed=2, curvature=0.004))
    assert len(frames) == 4
    for f in frames:
        n = len(f.gt.segments)
        assert n > 0
        assert f.gt.adjacency.shape == (n, n)
        assert f.bev_features.shape == (100, 50, 12)


def test_unknown_template_rejected():
    with pytest.raises(ValueError, match="unknown template"):
        ScenarioSpec(template="roundabout")


def test_straight_chain_adjacency():
    spec = small_spec(template="straight", n_lanes=3, seed=0)
    segments, adj, _ = build_network(spec)
    # every chunk has at most one successor, and lanes form disjoint chains
    assert adj.sum(axis=1).max() == 1.0
    assert adj.sum(axis=0).max() == 1.0
    assert int(adj.sum()) == len(segments) - spec.n_lanes


def test_split_and_merge_topology():
    _, adj, _ = build_network(small_spec(template="lane_split", seed=1))
    assert adj.sum(axis=1).max() == 2.0  # fork: one chunk feeds two branches
    _, adj, _ = build_network(small_spec(template="lane_merge", seed=1))
    assert adj.sum(axis=0).max() == 2.0  # join: two feeders share a successor


def test_intersection_has_turn_connector():
    segments, adj, _ = build_network(small_spec(template="intersection", seed=1))
    assert adj.sum(axis=1).max() == 2.0
    # the connector is curved: some segment spans both x and y substantially
    spans = np.array([np.ptp(s.centerline[:, :2], axis=0) for s in segments])
    assert (spans.min(axis=1) > 5.0).any()


def test_crossing_band_geometry():
    segments, adj, _ = build_network(small_spec(template="pedestrian_crossing_mix", seed=4))
    crossings = [i for i, s in enumerate(segments) if s.lane_class == "pedestrian_crossing"]
    assert crossings
    for i in crossings:
        s = segments[i]
        width = np.linalg.norm(s.left - s.right, axis=1)
        assert np.allclose(width, 3.0)
        assert s.left_type == "non_visible" and s.right_type == "non_visible"
        assert adj[i].sum() == 0 and adj[:, i].sum() == 0


def test_determinism():
    a = generate_sequence(small_spec(template="lane_split", seed=9, noise_sigma=0.4))
    b = generate_sequence(small_spec(template="lane_split", seed=9, noise_sigma=0.4))
    for fa, fb in zip(a, b):
        assert np.array_equal(fa.bev_features, fb.bev_features)
        assert len(fa.gt.segments) == len(fb.gt.segments)
        for sa, sb in zip(fa.gt.segments, fb.gt.segments):
            assert np.array_equal(sa.coordinates(), sb.coordinates())
            assert sa.instance_id == sb.instance_id


def test_instance_ids_persist_across_frames():
    frames = generate_sequence(small_spec(template="straight", seed=3, frames=6), render=False)
    labels = {}
    for f in frames:
        ids = [s.instance_id for s in f.gt.segments]
        assert len(ids) == len(set(ids))
        for s in f.gt.segments:
            key = (s.lane_class, s.left_type, s.right_type)
            assert labels.setdefault(s.instance_id, key) == key
    shared = set(s.instance_id for s in frames[0].gt.segments) & set(
        s.instance_id for s in frames[1].gt.segments
    )
    assert shared


def test_clip_window_bounds():
    spec = small_spec(template="intersection", seed=2)
    frames = generate_sequence(spec, render=False)
    for f in frames:
        for s in f.gt.segments:
            assert s.centerline.shape == (NUM_POINTS, 3)
            assert np.abs(s.centerline[:, 0]).max() <= spec.grid.x_range + 1e-9
            assert np.abs(s.centerline[:, 1]).max() <= spec.grid.y_range + 1e-9
            # boundaries may stick out by at most a lane half-width plus slack
            assert np.abs(s.left[:, 0]).max() <= spec.grid.x_range + spec.lane_width
            assert np.abs(s.right[:, 1]).max() <= spec.grid.y_range + spec.lane_width


def test_clip_requires_two_inside_points():
    spec = small_spec(template="straight", seed=0)
    segments, adj, path = build_network(spec)
    one_in = [g for g in segments if ((np.abs(g.centerline[:, 0] - 120.0) <= 50.0)).sum() == 1]
    pose = ego_pose(path, 120.0)
    graph = clip_to_window(segments, adj, pose, spec.grid)
    kept = {s.instance_id for s in graph.segments}
    for g in one_in:
        assert g.instance_id not in kept


def test_clip_drops_passed_segments():
    frames = generate_sequence(
        small_spec(template="straight", seed=3, frames=12, speed=10.0), render=False
    )
    first = {s.instance_id for s in frames[0].gt.segments}
    last = {s.instance_id for s in frames[-1].gt.segments}
    assert first - last  # early chunks fall behind the window


def test_fill_polygon_square():
    grid = SMALL_GRID
    square = np.array([[-5.0, -5.0], [5.0, -5.0], [5.0, 5.0], [-5.0, 5.0]])
    mask = fill_polygon(square, grid)
    assert mask.sum() == 100  # 10 m x 10 m at 1 m cells


def test_region_mask_covers_ribbon():
    seg = LaneSegment(
        np.stack([np.linspace(-10, 10, NUM_POINTS), np.zeros(NUM_POINTS), np.zeros(NUM_POINTS)], 1),
        np.stack([np.linspace(-10, 10, NUM_POINTS), np.full(NUM_POINTS, 1.75), np.zeros(NUM_POINTS)], 1),
        np.stack([np.linspace(-10, 10, NUM_POINTS), np.full(NUM_POINTS, -1.75), np.zeros(NUM_POINTS)], 1),
    )
    mask = instance_region_mask(seg, SMALL_GRID)
    assert abs(mask.sum() - 20 * 3.5) <= 20  # area within one cell-row tolerance
    dx, dy = SMALL_GRID.cell_size()
    assert mask[50, 25]  # cell containing the origin


def test_render_channel_layout():
    seg = LaneSegment(
        np.stack([np.linspace(-10, 10, NUM_POINTS), np.zeros(NUM_POINTS), np.zeros(NUM_POINTS)], 1),
        np.stack([np.linspace(-10, 10, NUM_POINTS), np.full(NUM_POINTS, 1.75), np.zeros(NUM_POINTS)], 1),
        np.stack([np.linspace(-10, 10, NUM_POINTS), np.full(NUM_POINTS, -1.75), np.zeros(NUM_POINTS)], 1),
        left_type="solid",
        right_type="dashed",
    )
    graph = LaneGraph([seg], np.zeros((1, 1)))
    bev = render_bev(graph, SMALL_GRID)
    assert bev[50, 25, 0] == 1.0  # centerline occupancy at the origin cell
    assert bev[:, :, 2].sum() > 0 and bev[:, :, 1].sum() == 0  # left solid
    assert bev[:, :, 6].sum() > 0 and bev[:, :, 5].sum() == 0  # right dashed
    assert bev[50, 25, 7] == 1.0 and bev[50, 25, 8] == 0.0
    H, W = SMALL_GRID.height_cells, SMALL_GRID.width_cells
    assert np.allclose(bev[:, 0, 9], (np.arange(H) + 0.5) / H)
    assert np.allclose(bev[0, :, 10], (np.arange(W) + 0.5) / W)


def test_render_needs_channels():
    with pytest.raises(ValueError, match="at least 11 channels"):
        render_bev(LaneGraph([], np.zeros((0, 0))), BEVGridSpec(channels=8))


def test_render_noise_streams():
    g = LaneGraph([], np.zeros((0, 0)))
    a = render_bev(g, SMALL_GRID, noise_sigma=0.5, rng=render_rng(7, 0))
    b = render_bev(g, SMALL_GRID, noise_sigma=0.5, rng=render_rng(7, 0))
    c = render_bev(g, SMALL_GRID, noise_sigma=0.5, rng=render_rng(7, 1))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.array_equal(a[:, :, 9:], c[:, :, 9:])  # positional pair stays clean


def test_shift_equivariance_one_cell():
    grid = SMALL_GRID
    dx, _ = grid.cell_size()
    frames = generate_sequence(
        small_spec(template="straight", seed=5, curvature=0.003, frames=2), render=False
    )
    g = frames[0].gt
    shifted = LaneGraph(
        [
            LaneSegment(
                s.centerline + [dx, 0, 0],
                s.left + [dx, 0, 0],
                s.right + [dx, 0, 0],
                lane_class=s.lane_class,
                left_type=s.left_type,
                right_type=s.right_type,
                instance_id=s.instance_id,
            )
            for s in g.segments
        ],
        g.adjacency,
    )
    a = render_bev(g, grid)
    b = render_bev(shifted, grid)
    assert np.array_equal(b[1:, :, :9], a[:-1, :, :9])


def test_gt_self_evaluation_is_perfect():
    frames = generate_sequence(
        small_spec(template="pedestrian_crossing_mix", seed=6, frames=3), render=False
    )
    gts = [f.gt for f in frames]
    preds = [graph_as_predictions(g) for g in gts]
    report = evaluate(preds, gts)
    assert report.map == 1.0
    assert report.top_lsls == 1.0
    assert report.acc_b == 1.0
    assert report.ols == 1.0
