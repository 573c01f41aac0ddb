from dataclasses import replace

import numpy as np
import pytest

from rqe_calib.entropy import CloudConfig
from rqe_calib.simulator import DEFAULT_TRUTH, NoiseModel, build_environment, make_dataset


@pytest.fixture(scope="session")
def room():
    return build_environment("simple_room")


@pytest.fixture(scope="session")
def noiseless_dataset(room):
    """One second of noiseless Simple Room data."""
    spec = replace(room.trajectory, duration=1.0, rng_seed=3)
    return make_dataset(room, spec, noise=NoiseModel.none(), true_params=DEFAULT_TRUTH)


@pytest.fixture(scope="session")
def noisy_dataset(room):
    """One second of Simple Room data with the default pose and range noise."""
    spec = replace(room.trajectory, duration=1.0, rng_seed=4)
    return make_dataset(room, spec, noise=NoiseModel(rng_seed=4), true_params=DEFAULT_TRUTH)


@pytest.fixture
def sparse_cfg():
    return CloudConfig(subsample_stride=16)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_psd(rng, size, scale=1.0):
    A = rng.standard_normal((size, size)) * scale
    return A @ A.T
