import logging
import math
from dataclasses import replace

import numpy as np
import pytest

from rqe_calib.diagnostics import cost_slice, observability_check
from rqe_calib.entropy import CloudConfig
from rqe_calib.errors import InvalidInputError
from rqe_calib.geometry import Pose
from rqe_calib.optimizer import SearchSpace
from rqe_calib.simulator import DEFAULT_TRUTH, NoiseModel, make_dataset


def test_scale_slice_is_lowest_at_the_truth(noiseless_dataset, sparse_cfg):
    data = noiseless_dataset
    frame = cost_slice(data.scans, data.poses, DEFAULT_TRUTH, 's', [-0.2, -0.1, 0.0, 0.1, 0.2], sparse_cfg)
    assert list(frame.columns) == ['offset', 'value', 'cost']
    np.testing.assert_allclose(frame['value'], DEFAULT_TRUTH.s + frame['offset'])
    assert frame['offset'][frame['cost'].idxmin()] == 0.0


def test_angle_slice_uses_radians(noiseless_dataset, sparse_cfg):
    data = noiseless_dataset
    offsets = np.radians([-3.0, 0.0, 3.0])
    frame = cost_slice(data.scans, data.poses, DEFAULT_TRUTH, 'psi', offsets, sparse_cfg)
    np.testing.assert_allclose(frame['value'], DEFAULT_TRUTH.psi + offsets)
    assert frame['cost'].notna().all()


def test_time_slice(noiseless_dataset, sparse_cfg):
    data = noiseless_dataset
    frame = cost_slice(data.scans, data.poses, DEFAULT_TRUTH, 'td', [-0.01, 0.0, 0.01], sparse_cfg)
    assert frame['value'].tolist() == [-0.01, 0.0, 0.01]
    assert np.isfinite(frame['cost']).all()


def test_slice_rejects_unknown_parameter(noiseless_dataset):
    with pytest.raises(InvalidInputError):
        cost_slice(noiseless_dataset.scans, noiseless_dataset.poses, DEFAULT_TRUTH, 'roll', [0.0])


def test_scale_slice_must_stay_positive(noiseless_dataset):
    with pytest.raises(InvalidInputError):
        cost_slice(noiseless_dataset.scans, noiseless_dataset.poses, DEFAULT_TRUTH, 's', [-1.0])


def test_static_trajectory_leaves_scale_unobservable(noiseless_dataset, sparse_cfg, caplog):
    scans = noiseless_dataset.scans[:5]
    poses = [Pose(scan.t) for scan in scans]
    space = SearchSpace.around(DEFAULT_TRUTH, translation=0.1, rotation=math.radians(15), scale_factor=2.0)
    with caplog.at_level(logging.WARNING):
        verdicts = observability_check(scans, poses, space, sparse_cfg, steps=7)
    assert set(verdicts) == {'x', 'y', 'z', 'phi', 'theta', 'psi', 's'}
    assert not verdicts['s'].observable
    assert verdicts['s'].variation == 0.0
    assert verdicts['theta'].observable
    assert "parameter s looks unobservable" in caplog.text


@pytest.fixture(scope="module")
def slice_dataset(room):
    spec = replace(room.trajectory, duration=10.0, rng_seed=21)
    return make_dataset(room, spec, noise=NoiseModel(rng_seed=21), true_params=DEFAULT_TRUTH)


@pytest.mark.slow
@pytest.mark.parametrize("param, offsets, tolerance", [
    ('x', np.linspace(-0.05, 0.05, 51), 0.010),
    ('y', np.linspace(-0.05, 0.05, 51), 0.010),
    ('z', np.linspace(-0.05, 0.05, 51), 0.010),
    ('phi', np.radians(np.linspace(-3.0, 3.0, 61)), math.radians(0.5)),
    ('theta', np.radians(np.linspace(-3.0, 3.0, 61)), math.radians(0.5)),
    ('psi', np.radians(np.linspace(-3.0, 3.0, 61)), math.radians(0.5)),
    ('s', np.linspace(-0.02, 0.02, 41), 2e-3),
])
def test_noisy_slice_minimum_is_near_the_truth(slice_dataset, param, offsets, tolerance):
    data = slice_dataset
    frame = cost_slice(data.scans, data.poses, DEFAULT_TRUTH, param, offsets, CloudConfig(subsample_stride=8))
    assert abs(frame['offset'][frame['cost'].idxmin()]) <= tolerance + 1e-12
