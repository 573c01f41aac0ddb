"""Tests for pose interpolation and the time-offset search."""

import math
from dataclasses import replace

import numpy as np
import pytest

from rqe_calib.entropy import CloudConfig
from rqe_calib.errors import ExtrapolationError, InvalidInputError, TimeAlignmentError
from rqe_calib.geometry import Pose, Scan
from rqe_calib.optimizer import OptimizerConfig, SearchSpace, calibrate
from rqe_calib.results import parameter_errors
from rqe_calib.simulator import DEFAULT_TRUTH, NoiseModel, make_dataset
from rqe_calib.temporal import (
    TimeAlignConfig,
    align_to_trajectory,
    calibrate_with_time,
    interpolate_pose,
    interpolate_poses,
    pair_scans_with_poses,
    time_align,
    usable_scans,
)


@pytest.fixture
def two_poses():
    Q0 = np.diag([0.01] * 3 + [0.0] * 3)
    Q1 = np.diag([0.03] * 3 + [0.0] * 3)
    return [Pose(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, Q=Q0), Pose(1.0, 2.0, -2.0, 4.0, 0.0, 0.0, math.pi / 2, Q=Q1)]


# ---- interpolation ----

def test_exact_timestamps_return_the_poses(two_poses):
    first, last = interpolate_poses(two_poses, [0.0, 1.0])
    assert first is two_poses[0]
    assert last is two_poses[1]


def test_midpoint(two_poses):
    for geodesic in (True, False):
        mid = interpolate_pose(two_poses, 0.5, geodesic=geodesic)
        assert mid.t == 0.5
        np.testing.assert_allclose([mid.x, mid.y, mid.z], [1.0, -1.0, 2.0])
        np.testing.assert_allclose([mid.phi, mid.theta, mid.psi], [0.0, 0.0, math.pi / 4], atol=1e-12)
        np.testing.assert_allclose(mid.Q, np.diag([0.02] * 3 + [0.0] * 3), atol=1e-15)


def test_interpolation_takes_the_short_way_round():
    poses = [Pose(0.0, psi=3.0), Pose(1.0, psi=-3.0)]
    for geodesic in (True, False):
        mid = interpolate_pose(poses, 0.5, geodesic=geodesic)
        assert abs(abs(mid.psi) - math.pi) < 1e-9


def test_geodesic_and_euler_interpolation_differ_off_axis():
    poses = [Pose(0.0), Pose(1.0, phi=1.0, theta=0.5, psi=1.2)]
    geodesic = interpolate_pose(poses, 0.5, geodesic=True)
    euler = interpolate_pose(poses, 0.5, geodesic=False)
    np.testing.assert_allclose([euler.phi, euler.theta, euler.psi], [0.5, 0.25, 0.6])
    assert not np.allclose(geodesic.vector[3:], euler.vector[3:], atol=1e-4)


@pytest.mark.parametrize("t", [-0.001, 1.001, float("nan")])
def test_no_extrapolation(two_poses, t):
    with pytest.raises(ExtrapolationError):
        interpolate_pose(two_poses, t)


def test_rejects_unordered_trajectory():
    with pytest.raises(InvalidInputError):
        interpolate_pose([Pose(1.0), Pose(0.0)], 0.5)


# ---- pairing ----

def _scans(times):
    return [Scan(t, [[1.0, 0.0]]) for t in times]


def test_align_drops_scans_outside_the_trajectory(two_poses):
    scans, poses = align_to_trajectory(_scans([0.0, 0.05, 0.5, 1.02]), two_poses, t_d=0.05)
    assert [s.t for s in scans] == pytest.approx([0.0, 0.45, 0.97])
    assert [p.t for p in poses] == [s.t for s in scans]


def test_pairing_keeps_aligned_data(two_poses):
    scans = _scans([0.0, 1.0])
    paired_scans, paired_poses = pair_scans_with_poses(scans, two_poses)
    assert paired_poses == two_poses
    assert paired_scans == scans


def test_pairing_interpolates_mismatched_times(two_poses):
    _, poses = pair_scans_with_poses(_scans([0.25, 0.75]), two_poses)
    assert [p.t for p in poses] == [0.25, 0.75]


def test_usable_scans_are_common_to_every_delay(two_poses):
    kept = usable_scans(_scans([0.0, 0.05, 0.5, 0.9, 1.0]), two_poses, -0.05, 0.05)
    assert [s.t for s in kept] == [0.05, 0.5, 0.9]


# ---- configuration ----

def test_grid_covers_the_range():
    grid = TimeAlignConfig(td_min=-0.05, td_max=0.05, resolution=0.001).grid()
    assert len(grid) == 101
    assert grid[0] == pytest.approx(-0.05)
    assert grid[-1] == pytest.approx(0.05)
    assert 0.0 in grid


@pytest.mark.parametrize("changes", [
    dict(td_min=0.01), dict(td_max=-0.01), dict(resolution=0.0), dict(refinement_passes=-1),
    dict(td_min=0.0, td_max=0.0),
])
def test_config_validation(changes):
    with pytest.raises(InvalidInputError):
        TimeAlignConfig(**changes)


def test_time_align_needs_a_usable_scan(two_poses):
    cfg = TimeAlignConfig(td_min=-0.6, td_max=0.6, resolution=0.1)
    with pytest.raises(TimeAlignmentError):
        time_align(_scans([0.5]), two_poses, DEFAULT_TRUTH, cfg)


def test_time_align_reports_the_grid(noiseless_dataset, sparse_cfg):
    data = noiseless_dataset
    cfg = TimeAlignConfig(td_min=-0.01, td_max=0.01, resolution=0.005, refinement_passes=0)
    result = time_align(data.scans, data.poses, DEFAULT_TRUTH, cfg, sparse_cfg)
    assert len(result.grid_td) == len(result.grid_cost) == 5
    assert result.n_evals == 5
    assert result.t_d in result.grid_td
    assert result.cost == result.grid_cost.min()
    assert 0 < result.n_scans < len(data.scans)


# ---- closed loop ----

@pytest.mark.slow
def test_recovers_injected_delay(room):
    spec = replace(room.trajectory, duration=4.0, rng_seed=11)
    data = make_dataset(room, spec, noise=NoiseModel.none(), true_params=DEFAULT_TRUTH, t_d=0.02)
    result = time_align(data.scans, data.poses, DEFAULT_TRUTH, TimeAlignConfig(), CloudConfig(subsample_stride=8))
    assert abs(result.t_d - 0.02) < 0.002


@pytest.mark.slow
def test_calibrate_with_time_adds_a_stage(room):
    spec = replace(room.trajectory, duration=2.0, rng_seed=12)
    data = make_dataset(room, spec, noise=NoiseModel.none(), true_params=DEFAULT_TRUTH, t_d=-0.01)
    space = SearchSpace.around(DEFAULT_TRUTH, translation=0.05, rotation=math.radians(2), scale_factor=1.1)
    opt_cfg = OptimizerConfig(skip_global=True, nm_max_evals=50)
    result = calibrate_with_time(data.scans, data.poses, space, opt_cfg, TimeAlignConfig(),
                                 CloudConfig(subsample_stride=16))
    assert list(result.stages) == ['time_align', 'nelder_mead']
    assert abs(result.t_d + 0.01) < 0.002
    assert 'time_align' in result.config


@pytest.mark.slow
def test_recovers_injected_delay_under_noise(room):
    spec = replace(room.trajectory, duration=4.0, rng_seed=13)
    data = make_dataset(room, spec, noise=NoiseModel(rng_seed=13), true_params=DEFAULT_TRUTH, t_d=0.02)
    result = time_align(data.scans, data.poses, DEFAULT_TRUTH, TimeAlignConfig(), CloudConfig(subsample_stride=8))
    assert abs(result.t_d - 0.02) < 0.005


def weighted_error(params):
    errors = parameter_errors(params, DEFAULT_TRUTH)
    return (sum(errors[name] / 15.0 for name in ('x', 'y', 'z'))
            + sum(errors[name] / 1.0 for name in ('phi', 'theta', 'psi'))
            + errors['s'] / 5.0)


@pytest.mark.slow
def test_time_calibrated_runs_beat_uncalibrated_ones(room):
    wins = 0
    for trial in range(5):
        spec = replace(room.trajectory, duration=5.0, rng_seed=200 + trial)
        noise = NoiseModel(rng_seed=200 + trial)
        data = make_dataset(room, spec, noise=noise, true_params=DEFAULT_TRUTH, t_d=0.02)
        sign = 1.0 if trial % 2 == 0 else -1.0
        seed = replace(DEFAULT_TRUTH,
                       x=DEFAULT_TRUTH.x + sign * 0.03, y=DEFAULT_TRUTH.y - sign * 0.03,
                       z=DEFAULT_TRUTH.z + sign * 0.03,
                       phi=DEFAULT_TRUTH.phi + sign * math.radians(5), psi=DEFAULT_TRUTH.psi - sign * math.radians(5))
        space = SearchSpace.around(seed, translation=0.1, rotation=math.radians(10), scale_factor=1.5, rng_seed=trial)
        opt_cfg = OptimizerConfig(crs_max_evals=800, nm_max_evals=1000)
        cloud_cfg = CloudConfig(subsample_stride=8)
        calibrated = calibrate_with_time(data.scans, data.poses, space, opt_cfg, TimeAlignConfig(), cloud_cfg)
        scans, poses = pair_scans_with_poses(data.scans, data.poses)
        uncalibrated = calibrate(scans, poses, space, opt_cfg, cloud_cfg)
        wins += weighted_error(calibrated.params) < weighted_error(uncalibrated.params)
    assert wins >= 4
