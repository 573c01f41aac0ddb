"""Tests for the global and local search stages and the calibration driver."""

import logging
import math
from dataclasses import replace

import numpy as np
import pytest

from rqe_calib.entropy import CloudConfig
from rqe_calib.errors import InvalidInputError, OptimizationFailedError, PreconditionError
from rqe_calib.geometry import CalibParams, Pose, Scan
from rqe_calib.optimizer import (
    ObjectiveTracker,
    OptimizerConfig,
    SearchSpace,
    calibrate,
    crs_search,
    nelder_mead,
)
from rqe_calib.results import parameter_errors
from rqe_calib.simulator import DEFAULT_TRUTH, NoiseModel, make_dataset


def shifted_quadratic(center):
    center = np.asarray(center, dtype=float)

    def f(x):
        return float(np.sum((x - center) ** 2 * np.arange(1, len(x) + 1)))
    return f


@pytest.fixture
def box():
    return SearchSpace(lower=[-5.0, -5.0, -5.0], upper=[5.0, 5.0, 5.0], seed=[4.0, -4.0, 0.0], rng_seed=3)


# ---- search space ----

def test_search_space_validation():
    with pytest.raises(InvalidInputError):
        SearchSpace([0.0], [0.0], [0.0])
    with pytest.raises(InvalidInputError):
        SearchSpace([0.0], [1.0], [2.0])
    with pytest.raises(InvalidInputError):
        SearchSpace([0.0, 0.0], [1.0, 1.0], [0.5])


def test_search_space_around_a_guess():
    seed = CalibParams(0.1, 0.0, 0.0, 0.0, math.radians(80), 0.0, 1.0)
    space = SearchSpace.around(seed, translation=0.5, rotation=math.radians(15), scale_factor=4.0)
    assert space.dim == 7
    assert space.lower[0] == pytest.approx(-0.4)
    assert space.upper[4] == pytest.approx(math.radians(95))
    assert math.exp(space.lower[6]) == pytest.approx(0.25)
    assert math.exp(space.upper[6]) == pytest.approx(4.0)
    assert space.seed_params.theta == pytest.approx(math.radians(80))


def test_default_population_size():
    assert OptimizerConfig().population_size(7) == 80
    with pytest.raises(InvalidInputError):
        OptimizerConfig(crs_population=10).population_size(7)


# ---- tracker ----

def test_tracker_records_best_so_far():
    costs = iter([5.0, 3.0, 4.0, float("nan"), 1.0, 2.0])
    tracker = ObjectiveTracker(lambda x: next(costs))
    for _ in range(6):
        tracker(np.zeros(1))
    best = [b for _, _, b in tracker.trace]
    assert best == [5.0, 3.0, 3.0, 3.0, 1.0, 1.0]
    assert tracker.trace[3][1] == math.inf
    assert tracker.n_evals == 6


# ---- Nelder-Mead ----

def test_nelder_mead_finds_quadratic_minimum():
    f = shifted_quadratic([1.0, -2.0, 0.5])
    result = nelder_mead(f, np.zeros(3), OptimizerConfig(nm_xtol=1e-8, nm_ftol=1e-14, nm_max_evals=5000), step=1.0)
    np.testing.assert_allclose(result.x, [1.0, -2.0, 0.5], atol=1e-5)
    assert result.converged


def test_nelder_mead_respects_budget():
    f = shifted_quadratic([1.0, -2.0, 0.5])
    result = nelder_mead(f, np.zeros(3), OptimizerConfig(nm_max_evals=25), step=1.0)
    assert result.n_evals <= 25
    assert not result.converged


def test_nelder_mead_never_worse_than_seed():
    f = shifted_quadratic([0.0, 0.0])
    seed = np.array([1e-3, -1e-3])
    result = nelder_mead(f, seed, OptimizerConfig(nm_max_evals=50), step=10.0)
    assert result.fun <= f(seed)


def test_nelder_mead_rejects_non_finite_seed():
    with pytest.raises(InvalidInputError):
        nelder_mead(lambda x: 0.0, np.array([np.nan, 0.0]))


def rosenbrock(x):
    return float(100.0 * (x[1] - x[0] ** 2) ** 2 + (1.0 - x[0]) ** 2)


def test_nelder_mead_solves_rosenbrock():
    cfg = OptimizerConfig(nm_xtol=1e-8, nm_ftol=1e-14, nm_max_evals=2000)
    result = nelder_mead(rosenbrock, np.array([-1.2, 1.0]), cfg)
    assert result.n_evals <= 2000
    assert result.fun < 1e-6


def test_nelder_mead_stays_in_the_box():
    space = SearchSpace(lower=[-1.0, -1.0], upper=[1.0, 1.0], seed=[0.0, 0.0])
    visited = []

    def f(x):
        visited.append(np.array(x))
        return float(np.sum((x - 5.0) ** 2))

    result = nelder_mead(f, space.seed, OptimizerConfig(nm_max_evals=500), space=space)
    assert space.contains(result.x)
    assert all(space.contains(x) for x in visited)
    assert result.n_evals == len(visited)
    assert np.all(result.x > 0.5)


def test_nelder_mead_simplex_from_a_seed_on_the_upper_bound():
    space = SearchSpace(lower=[0.0, 0.0], upper=[1.0, 1.0], seed=[1.0, 1.0])
    visited = []

    def f(x):
        visited.append(np.array(x))
        return float(np.sum(x ** 2))

    nelder_mead(f, space.seed, OptimizerConfig(nm_max_evals=3), space=space)
    np.testing.assert_allclose(visited, [[1.0, 1.0], [0.9, 1.0], [1.0, 0.9]])


def test_nelder_mead_rejects_seed_outside_the_box():
    space = SearchSpace(lower=[0.0], upper=[1.0], seed=[0.5])
    with pytest.raises(InvalidInputError):
        nelder_mead(lambda x: 0.0, np.array([2.0]), space=space)


def test_nelder_mead_restarts_once_from_the_seed(caplog):
    visited = []

    def f(x):
        visited.append(np.array(x))
        return -float(x[0])

    seed = np.array([3.0, 3.0])
    with caplog.at_level(logging.WARNING), pytest.raises(OptimizationFailedError):
        nelder_mead(f, seed, step=[1.0, 0.0])
    assert "degenerated" in caplog.text
    assert len(visited) == 6
    # the best first vertex was (4, 3); the restart is built around the seed
    np.testing.assert_allclose(visited[3], seed, atol=0.1)


# ---- CRS ----

def test_crs_finds_global_region(box):
    f = shifted_quadratic([-2.0, 3.0, 1.0])
    result = crs_search(f, box, OptimizerConfig(crs_max_evals=3000, crs_ftol=1e-12))
    np.testing.assert_allclose(result.x, [-2.0, 3.0, 1.0], atol=0.05)


def test_crs_is_deterministic(box):
    f = shifted_quadratic([-2.0, 3.0, 1.0])
    cfg = OptimizerConfig(crs_max_evals=500)
    first = crs_search(f, box, cfg)
    second = crs_search(f, box, cfg)
    np.testing.assert_array_equal(first.x, second.x)
    assert first.n_evals == second.n_evals


def test_crs_respects_budget(box):
    result = crs_search(shifted_quadratic([0.0, 0.0, 0.0]), box, OptimizerConfig(crs_max_evals=100))
    assert result.n_evals <= 100


def test_crs_fails_on_non_finite_population(box):
    with pytest.raises(OptimizationFailedError) as info:
        crs_search(lambda x: float("nan"), box, OptimizerConfig(crs_max_evals=100))
    assert len(info.value.trace) == 40


def test_crs_budget_must_cover_the_population(box):
    with pytest.raises(InvalidInputError):
        crs_search(shifted_quadratic([0.0, 0.0, 0.0]), box, OptimizerConfig(crs_max_evals=39))


def test_crs_reaches_the_origin_of_a_7d_sphere():
    space = SearchSpace(lower=[-1.0] * 7, upper=[1.0] * 7, seed=[0.5] * 7, rng_seed=11)
    result = crs_search(lambda x: float(np.dot(x, x)), space, OptimizerConfig(crs_max_evals=20000, crs_ftol=1e-12))
    assert result.n_evals <= 20000
    assert np.linalg.norm(result.x) <= 1e-2


def test_crs_on_a_constant_objective(box):
    result = crs_search(lambda x: 1.0, box, OptimizerConfig(crs_max_evals=500))
    assert box.contains(result.x)
    assert result.fun == 1.0
    assert result.converged


def test_crs_on_rastrigin_never_loses_the_seed():
    def rastrigin(x):
        return float(10.0 * len(x) + np.sum(x ** 2 - 10.0 * np.cos(2.0 * np.pi * x)))

    space = SearchSpace(lower=[-5.12] * 3, upper=[5.12] * 3, seed=[2.2, -1.7, 0.4], rng_seed=5)
    result = crs_search(rastrigin, space, OptimizerConfig(crs_max_evals=1500))
    assert space.contains(result.x)
    assert result.fun <= rastrigin(space.seed)


def test_crs_then_nelder_mead_share_a_tracker(box):
    f = shifted_quadratic([-2.0, 3.0, 1.0])
    cfg = OptimizerConfig(crs_max_evals=300, nm_max_evals=300)
    tracker = ObjectiveTracker(f)
    crs = crs_search(None, box, cfg, tracker=tracker)
    nm = nelder_mead(None, crs.x, cfg, space=box, tracker=tracker)
    assert tracker.n_evals == crs.n_evals + nm.n_evals
    assert nm.fun <= crs.fun
    best = [b for _, _, b in tracker.trace]
    assert all(a >= b for a, b in zip(best, best[1:]))


# ---- calibration driver ----

def test_calibrate_preconditions():
    space = SearchSpace.around(CalibParams())
    with pytest.raises(PreconditionError):
        calibrate([], [Pose(0.0), Pose(1.0)], space)
    with pytest.raises(PreconditionError):
        calibrate([Scan(0.0, [[1.0, 0.0]])], [Pose(0.0)], space)
    invalid = [Scan(0.0, [[1.0, 0.0]], [False]), Scan(1.0, [[1.0, 0.0]], [False])]
    with pytest.raises(PreconditionError):
        calibrate(invalid, [Pose(0.0), Pose(1.0)], space)


def test_calibrate_local_stage_improves_on_seed(noiseless_dataset):
    data = noiseless_dataset
    seed = replace(DEFAULT_TRUTH, x=DEFAULT_TRUTH.x + 0.03, psi=DEFAULT_TRUTH.psi + math.radians(2))
    space = SearchSpace.around(seed)
    cfg = OptimizerConfig(skip_global=True, nm_max_evals=60)
    cloud_cfg = CloudConfig(subsample_stride=16)
    result = calibrate(data.scans, data.poses, space, cfg, cloud_cfg)
    assert set(result.stages) == {'nelder_mead'}
    assert result.total_evals == len(result.trace) <= 60
    assert result.cost <= result.trace[0][1]
    assert result.n_points == len(range(0, data.n_points, 16))
    assert result.digests['scans'] and result.digests['poses']
    best = result.best_so_far()
    assert all(a >= b for a, b in zip(best, best[1:]))


@pytest.mark.slow
def test_noiseless_closed_loop(room):
    spec = replace(room.trajectory, duration=10.0, rng_seed=7)
    data = make_dataset(room, spec, noise=NoiseModel.none(), true_params=DEFAULT_TRUTH)
    seed = CalibParams(
        DEFAULT_TRUTH.x + 0.03, DEFAULT_TRUTH.y - 0.03, DEFAULT_TRUTH.z + 0.03,
        DEFAULT_TRUTH.phi + math.radians(5), DEFAULT_TRUTH.theta - math.radians(5), DEFAULT_TRUTH.psi + math.radians(5),
        DEFAULT_TRUTH.s * 1.2)
    space = SearchSpace.around(seed, translation=0.1, rotation=math.radians(10), scale_factor=1.5)
    cfg = OptimizerConfig(crs_max_evals=1500, nm_max_evals=3000, nm_xtol=1e-7, nm_ftol=1e-13)
    result = calibrate(data.scans, data.poses, space, cfg, CloudConfig(subsample_stride=8, sigma_kernel=0.02))
    errors = parameter_errors(result.params, DEFAULT_TRUTH)
    assert max(errors['x'], errors['y'], errors['z']) < 1.0
    assert max(errors['phi'], errors['theta'], errors['psi']) < 0.05
    assert errors['s'] < 1.0


def perturbed_seed(truth):
    return CalibParams(
        truth.x + 0.03, truth.y - 0.03, truth.z + 0.03,
        truth.phi + math.radians(5), truth.theta - math.radians(5), truth.psi + math.radians(5),
        truth.s * 1.2)


@pytest.mark.slow
def test_noisy_closed_loop_mean_errors(room):
    runs = []
    for seed in range(5):
        spec = replace(room.trajectory, duration=15.0, rng_seed=100 + seed)
        data = make_dataset(room, spec, noise=NoiseModel(rng_seed=100 + seed), true_params=DEFAULT_TRUTH)
        space = SearchSpace.around(perturbed_seed(DEFAULT_TRUTH), translation=0.1, rotation=math.radians(10),
                                   scale_factor=1.5, rng_seed=seed)
        cfg = OptimizerConfig(crs_max_evals=1500, nm_max_evals=2000)
        result = calibrate(data.scans, data.poses, space, cfg, CloudConfig(subsample_stride=8))
        runs.append(parameter_errors(result.params, DEFAULT_TRUTH))
    mean = {name: np.mean([errors[name] for errors in runs]) for name in runs[0]}
    assert max(mean['x'], mean['y'], mean['z']) <= 15.0
    assert max(mean['phi'], mean['theta'], mean['psi']) <= 1.0
    assert mean['s'] <= 5.0
