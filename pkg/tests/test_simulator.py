"""Tests for the scenes, trajectories, raycasting lidar and noise injection."""

import math
from dataclasses import replace

import numpy as np
import pytest

from rqe_calib.errors import TrajectoryError, UnknownEnvironmentError
from rqe_calib.geometry import Pose, Scan, Transform
from rqe_calib.simulator import (
    DEFAULT_TRUTH,
    ENVIRONMENTS,
    Cylinder,
    Environment,
    LidarModel,
    NoiseModel,
    Plane,
    Sphere,
    TrajectorySpec,
    Triangles,
    apply_noise,
    build_environment,
    generate_trajectory,
    make_dataset,
    raycast_scan,
)


def random_directions(rng, n):
    d = rng.standard_normal((n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


# ---- scenes ----

@pytest.mark.parametrize("name, counts", [
    ("simple_room", dict(plane=6, cylinder=0, sphere=0)),
    ("parking_lot", dict(plane=6, cylinder=4, sphere=0)),
    ("plane_city", dict(plane=12, cylinder=0, sphere=0)),
    ("quadratic_forest", dict(plane=1, cylinder=18, sphere=18)),
])
def test_environment_contents(name, counts):
    env = build_environment(name)
    assert env.name == name
    for kind, expected in counts.items():
        assert env.count(kind) == expected


def test_triangle_array_layout_is_seeded():
    first = build_environment("triangle_array")
    second = build_environment("triangle_array")
    assert first.count("triangles") == 1
    np.testing.assert_array_equal(first.primitives[0].vertices, second.primitives[0].vertices)
    assert len(first.primitives[0]) > 100


def test_unknown_environment():
    with pytest.raises(UnknownEnvironmentError):
        build_environment("moon_base")


def test_room_dimensions_can_be_overridden():
    env = build_environment("simple_room", length=20.0)
    assert env.free_upper[0] == pytest.approx(19.5)


# ---- primitives ----

def test_plane_intersection_oracle(rng):
    plane = Plane([0.0, 0.0, 5.0], [0, 0, 1], [1, 0, 0], 1e6, 1e6)
    origins = rng.uniform(-10, 10, (1000, 3))
    origins[:, 2] = rng.uniform(-10, 4, 1000)
    directions = random_directions(rng, 1000)
    directions[:, 2] = np.abs(directions[:, 2]) + 0.1
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    expected = (5.0 - origins[:, 2]) / directions[:, 2]
    np.testing.assert_allclose(plane.intersect(origins, directions), expected, rtol=1e-9)


def test_parallel_ray_misses_plane():
    plane = Plane([0.0, 0.0, 1.0], [0, 0, 1], [1, 0, 0], 10.0, 10.0)
    assert plane.intersect(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]]))[0] == math.inf


def test_ray_pointing_away_misses_plane():
    plane = Plane([0.0, 0.0, 1.0], [0, 0, 1], [1, 0, 0], 10.0, 10.0)
    assert plane.intersect(np.zeros((1, 3)), np.array([[0.0, 0.0, -1.0]]))[0] == math.inf


def test_plane_patch_edges():
    plane = Plane([0.0, 0.0, 1.0], [0, 0, 1], [1, 0, 0], 1.0, 1.0)
    origins = np.array([[0.5, 0.5, 0.0], [1.5, 0.0, 0.0]])
    up = np.array([[0.0, 0.0, 1.0]] * 2)
    hits = plane.intersect(origins, up)
    assert hits[0] == pytest.approx(1.0)
    assert hits[1] == math.inf
    np.testing.assert_allclose(plane.distance(np.array([[0.0, 0.0, 3.0], [3.0, 0.0, 1.0]])), [2.0, 2.0])


def test_sphere_intersection_oracle(rng):
    sphere = Sphere([1.0, -2.0, 3.0], 2.5)
    directions = random_directions(rng, 1000)
    from_center = sphere.intersect(np.tile(sphere.center, (1000, 1)), directions)
    np.testing.assert_allclose(from_center, 2.5, rtol=1e-9)
    distance = rng.uniform(5, 20, 1000)
    origins = sphere.center - distance[:, None] * directions
    np.testing.assert_allclose(sphere.intersect(origins, directions), distance - 2.5, rtol=1e-9)


def test_sphere_miss():
    sphere = Sphere([0.0, 0.0, 0.0], 1.0)
    assert sphere.intersect(np.array([[0.0, 2.0, -5.0]]), np.array([[0.0, 0.0, 1.0]]))[0] == math.inf


def test_cylinder_intersection_oracle(rng):
    cylinder = Cylinder([0.0, 0.0, -50.0], [0, 0, 1], 3.0, 100.0)
    directions = random_directions(rng, 1000)
    # keep every hit within the cylinder height
    directions[:, 2] = rng.uniform(-1, 1, 1000) * np.hypot(directions[:, 0], directions[:, 1])
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    expected = 3.0 / np.hypot(directions[:, 0], directions[:, 1])
    np.testing.assert_allclose(cylinder.intersect(np.zeros((1000, 3)), directions), expected, rtol=1e-9)


def test_cylinder_is_open_and_finite():
    cylinder = Cylinder([0.0, 0.0, 0.0], [0, 0, 1], 1.0, 2.0)
    along_axis = cylinder.intersect(np.array([[0.0, 0.0, -1.0]]), np.array([[0.0, 0.0, 1.0]]))
    above = cylinder.intersect(np.array([[-5.0, 0.0, 3.0]]), np.array([[1.0, 0.0, 0.0]]))
    assert along_axis[0] == math.inf
    assert above[0] == math.inf
    assert cylinder.distance(np.array([[3.0, 0.0, 1.0]]))[0] == pytest.approx(2.0)


def test_triangle_hit_and_miss():
    triangles = Triangles([[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]])
    origins = np.array([[0.2, 0.2, 1.0], [0.8, 0.8, 1.0]])
    down = np.array([[0.0, 0.0, -1.0]] * 2)
    hits = triangles.intersect(origins, down)
    assert hits[0] == pytest.approx(1.0)
    assert hits[1] == math.inf
    np.testing.assert_allclose(triangles.distance(np.array([[0.2, 0.2, 3.0], [2.0, 0.0, 0.0]])), [3.0, 1.0])


# ---- lidar ----

def test_default_lidar_has_961_beams():
    lidar = LidarModel()
    assert lidar.beam_count == 961
    assert lidar.beam_angles[0] == pytest.approx(-math.radians(120))
    assert lidar.beam_angles[-1] == pytest.approx(math.radians(120))


def test_scan_inside_a_cylinder_sees_constant_range():
    env = Environment("drum", [Cylinder([0.0, 0.0, -2.0], [0, 0, 1], 10.0, 4.0)], np.full(3, -1.0), np.full(3, 1.0))
    scan = raycast_scan(env, Transform.identity(), LidarModel(), t=0.5)
    assert scan.t == 0.5
    assert scan.valid.all()
    np.testing.assert_allclose(np.hypot(scan.points[:, 0], scan.points[:, 1]), 10.0, rtol=1e-9)


def test_out_of_range_returns_are_invalid():
    env = Environment("drum", [Cylinder([0.0, 0.0, -2.0], [0, 0, 1], 10.0, 4.0)], np.full(3, -1.0), np.full(3, 1.0))
    scan = raycast_scan(env, Transform.identity(), LidarModel(range_max=5.0))
    assert not scan.valid.any()
    np.testing.assert_array_equal(scan.points, 0.0)


# ---- trajectories ----

def test_constant_trajectory():
    spec = TrajectorySpec(2.0, [1.0, 2.0, 3.0, 0.1, 0.2, 0.3], np.zeros(6), np.zeros(6))
    poses = generate_trajectory(spec, 40.0)
    assert len(poses) == 80
    for pose in poses:
        np.testing.assert_array_equal(pose.vector, [1.0, 2.0, 3.0, 0.1, 0.2, 0.3])


def test_default_trajectory_length(room):
    poses = generate_trajectory(room.trajectory, 40.0, room)
    assert len(poses) == 2000
    assert poses[1].t == pytest.approx(0.025)


def test_trajectory_leaving_free_space(room):
    spec = TrajectorySpec(1.0, [0.1, 4.0, 1.5, 0.0, 0.0, 0.0], np.zeros(6), np.zeros(6))
    with pytest.raises(TrajectoryError):
        generate_trajectory(spec, 10.0, room)


def test_randomized_trajectory_is_deterministic(room):
    first = room.trajectory.randomized(5)
    second = room.trajectory.randomized(5)
    other = room.trajectory.randomized(6)
    np.testing.assert_array_equal(first.frequencies, second.frequencies)
    np.testing.assert_array_equal(first.phases, second.phases)
    assert not np.array_equal(first.frequencies, other.frequencies)
    assert np.all((first.frequencies >= 0.05) & (first.frequencies <= 0.4))


@pytest.mark.parametrize("name", sorted(ENVIRONMENTS))
def test_default_motion_stays_in_free_space(name):
    env = build_environment(name)
    for seed in (None, 1, 2):
        generate_trajectory(replace(env.trajectory, rng_seed=seed), 40.0, env)


# ---- noise ----

def test_zero_noise_is_identity(noiseless_dataset):
    poses, scans = apply_noise(noiseless_dataset.poses, noiseless_dataset.scans, NoiseModel.none())
    for before, after in zip(noiseless_dataset.poses, poses):
        np.testing.assert_array_equal(before.vector, after.vector)
    for before, after in zip(noiseless_dataset.scans, scans):
        np.testing.assert_array_equal(before.points, after.points)
        np.testing.assert_array_equal(before.valid, after.valid)


def test_noisy_poses_carry_diagonal_covariance():
    noise = NoiseModel(translation_std=0.1, rotation_std=0.02)
    poses, _ = apply_noise([Pose(0.0), Pose(1.0)], [], noise)
    expected = np.diag([0.01] * 3 + [0.0004] * 3)
    for pose in poses:
        np.testing.assert_allclose(pose.Q, expected)


def test_range_noise_is_unbiased():
    n = 100_000
    scan = Scan(0.0, np.tile([[6.0, 8.0]], (n, 1)))
    _, (noisy,) = apply_noise([], [scan], NoiseModel(range_std=0.05, rng_seed=9))
    ranges = np.hypot(noisy.points[:, 0], noisy.points[:, 1])
    assert abs(ranges.mean() - 10.0) < 3 * 0.05 / math.sqrt(n)
    assert ranges.std() == pytest.approx(0.05, rel=0.02)
    # noise acts along the beam
    np.testing.assert_allclose(noisy.points[:, 1] / noisy.points[:, 0], 8.0 / 6.0)


# ---- datasets ----

def _short(env, seed=3):
    return replace(env.trajectory, duration=0.5, rng_seed=seed)


def test_dataset_is_deterministic(room):
    first = make_dataset(room, _short(room), noise=NoiseModel(rng_seed=1))
    second = make_dataset(room, _short(room), noise=NoiseModel(rng_seed=1))
    for a, b in zip(first.scans, second.scans):
        np.testing.assert_array_equal(a.points, b.points)
    for a, b in zip(first.poses, second.poses):
        np.testing.assert_array_equal(a.vector, b.vector)


def test_dataset_timestamps_and_delay(room):
    aligned = make_dataset(room, _short(room))
    delayed = make_dataset(room, _short(room), t_d=0.02)
    assert len(aligned.scans) == len(aligned.poses) == 20
    assert [s.t for s in aligned.scans] == [p.t for p in aligned.poses]
    for a, d in zip(aligned.scans, delayed.scans):
        assert d.t == a.t + 0.02
        np.testing.assert_array_equal(a.points, d.points)
    assert delayed.t_d == 0.02


def test_reported_translation_is_divided_by_scale(room):
    metric = make_dataset(room, _short(room))
    scaled = make_dataset(room, _short(room), true_params=replace(DEFAULT_TRUTH, s=2.0))
    for a, b in zip(metric.poses, scaled.poses):
        np.testing.assert_allclose(b.vector[:3], a.vector[:3] / 2.0)
        np.testing.assert_array_equal(b.vector[3:], a.vector[3:])


def test_noiseless_room_dataset_is_mostly_valid(noiseless_dataset):
    assert noiseless_dataset.n_points > 0.9 * 40 * 961
    assert noiseless_dataset.truth == DEFAULT_TRUTH
    assert noiseless_dataset.environment == "simple_room"


@pytest.mark.parametrize("name", sorted(ENVIRONMENTS))
def test_every_scene_produces_returns(name):
    env = build_environment(name)
    data = make_dataset(env, replace(env.trajectory, duration=0.1))
    assert len(data.scans) == 4
    assert data.n_points > 0
