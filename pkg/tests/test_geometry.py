"""Distance and resampling oracles: implementation vs brute force."""
import numpy as np
import pytest

from conftest import chamfer_bruteforce, frechet_bruteforce
from lanestream.core import LaneSegment, Pose, apply_transform
from lanestream.geometry import (
    chamfer,
    discrete_frechet,
    resample_polyline,
    segment_distance,
)


def random_curve(rng, n, scale=10.0):
    return np.cumsum(rng.uniform(-scale / n, scale / n, size=(n, 3)), axis=0)


def test_frechet_matches_bruteforce():
    rng = np.random.default_rng(11)
    for _ in range(100):
        n, m = rng.integers(2, 7), rng.integers(2, 7)
        a, b = random_curve(rng, n), random_curve(rng, m)
        assert discrete_frechet(a, b) == pytest.approx(frechet_bruteforce(a, b), abs=1e-12)


def test_chamfer_matches_bruteforce():
    rng = np.random.default_rng(12)
    for _ in range(100):
        n, m = rng.integers(2, 9), rng.integers(2, 9)
        a, b = random_curve(rng, n), random_curve(rng, m)
        assert chamfer(a, b) == pytest.approx(chamfer_bruteforce(a, b), abs=1e-12)


def test_parallel_lines_offset():
    xs = np.linspace(0, 9, 10)
    a = np.stack([xs, np.zeros(10), np.zeros(10)], axis=1)
    b = a + np.array([0.0, 1.5, 0.0])
    assert chamfer(a, b) == pytest.approx(1.5, abs=1e-12)
    assert discrete_frechet(a, b) == pytest.approx(1.5, abs=1e-12)


def test_identical_curves_zero():
    rng = np.random.default_rng(13)
    a = random_curve(rng, 10)
    assert discrete_frechet(a, a) == 0.0
    assert chamfer(a, a) == 0.0


def test_symmetry():
    rng = np.random.default_rng(14)
    for _ in range(20):
        a, b = random_curve(rng, 6), random_curve(rng, 8)
        assert discrete_frechet(a, b) == pytest.approx(discrete_frechet(b, a), abs=1e-12)
        assert chamfer(a, b) == pytest.approx(chamfer(b, a), abs=1e-12)


def test_chamfer_never_exceeds_frechet():
    rng = np.random.default_rng(15)
    for _ in range(200):
        a, b = random_curve(rng, rng.integers(2, 10)), random_curve(rng, rng.integers(2, 10))
        assert chamfer(a, b) <= discrete_frechet(a, b) + 1e-12


def test_rigid_invariance():
    rng = np.random.default_rng(16)
    psi = Pose.from_yaw(1.1, [4.0, -7.0, 2.0])
    for _ in range(20):
        a, b = random_curve(rng, 7), random_curve(rng, 7)
        fa = discrete_frechet(apply_transform(psi, a), apply_transform(psi, b))
        ca = chamfer(apply_transform(psi, a), apply_transform(psi, b))
        assert fa == pytest.approx(discrete_frechet(a, b), abs=1e-9)
        assert ca == pytest.approx(chamfer(a, b), abs=1e-9)


def test_empty_curve_rejected():
    with pytest.raises(ValueError, match="empty polyline"):
        discrete_frechet(np.zeros((0, 3)), np.zeros((3, 3)))
    with pytest.raises(ValueError, match="empty polyline"):
        chamfer(np.zeros((3, 3)), np.zeros((0, 3)))


def test_resample_straight_line():
    line = np.array([[0.0, 0.0, 0.0], [9.0, 0.0, 0.0]])
    out = resample_polyline(line, 10)
    np.testing.assert_allclose(out[:, 0], np.arange(10.0), atol=1e-12)
    np.testing.assert_array_equal(out[:, 1:], np.zeros((10, 2)))


def test_resample_uniform_arclength():
    # quarter circle: equal arclength between consecutive samples
    t = np.linspace(0, np.pi / 2, 200)
    arc = np.stack([10 * np.cos(t), 10 * np.sin(t), np.zeros_like(t)], axis=1)
    out = resample_polyline(arc, 10)
    steps = np.linalg.norm(np.diff(out, axis=0), axis=1)
    np.testing.assert_allclose(steps, steps[0], rtol=1e-4)
    np.testing.assert_array_equal(out[0], arc[0])
    np.testing.assert_array_equal(out[-1], arc[-1])


def test_resample_preserves_endpoints():
    rng = np.random.default_rng(17)
    for _ in range(20):
        curve = random_curve(rng, rng.integers(2, 30))
        out = resample_polyline(curve, 10)
        np.testing.assert_array_equal(out[0], curve[0])
        np.testing.assert_array_equal(out[-1], curve[-1])


def test_resample_degenerate_point():
    pt = np.array([[2.0, 3.0, 1.0], [2.0, 3.0, 1.0]])
    out = resample_polyline(pt, 10)
    assert out.shape == (10, 3)
    np.testing.assert_array_equal(out, np.repeat(pt[:1], 10, axis=0))


def test_resample_idempotent_on_line():
    line = np.stack([np.linspace(0, 9, 10), np.zeros(10), np.zeros(10)], axis=1)
    np.testing.assert_allclose(resample_polyline(line, 10), line, atol=1e-12)


def test_segment_distance_mean_of_three():
    xs = np.linspace(0, 9, 10)
    center = np.stack([xs, np.zeros(10), np.zeros(10)], axis=1)
    seg_a = LaneSegment(center, center + [0, 1.75, 0], center - [0, 1.75, 0])
    shifted = center + np.array([0.0, 0.6, 0.0])
    seg_b = LaneSegment(shifted, shifted + [0, 1.75, 0], shifted - [0, 1.75, 0])
    for kind in ("frechet", "chamfer"):
        assert segment_distance(seg_a, seg_b, kind) == pytest.approx(0.6, abs=1e-12)
    with pytest.raises(ValueError, match="distance kind"):
        segment_distance(seg_a, seg_b, "hausdorff")
