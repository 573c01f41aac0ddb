"""
Temporal calibration.

Pose interpolation along a trajectory, the pairing step that gives every
scan a pose at its (shifted) timestamp, and the time-offset pre-calibration:
with the spatial parameters held fixed, the entropy cost is scanned over a
grid of delays t_d and the best cell is refined by golden-section search.

Convention: a lidar delayed by t_d stamps a scan taken at true time tau as
tau + t_d, so scans are shifted by -t_d to line up with the poses.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.spatial.transform import Rotation, Slerp

from .entropy import CloudBuilder, CloudConfig, check_alignment, rqe_cost
from .errors import AlignmentError, EmptyCloudError, ExtrapolationError, InvalidInputError, TimeAlignmentError
from .geometry import EULER_SEQUENCE, Pose, Scan
from .optimizer import OptimizerConfig, calibrate
from .utils import clamp_psd, wrap_angle

logger = logging.getLogger(__name__)


@dataclass
class TimeAlignConfig:
    """
    Grid and refinement of the time-offset search.

    Attributes:
        td_min (float): Smallest candidate delay, seconds (<= 0).
        td_max (float): Largest candidate delay, seconds (>= 0).
        resolution (float): Grid step, seconds.
        refinement_passes (int): Golden-section iterations around the best
            grid cell; 0 keeps the grid optimum.
        geodesic (bool): Interpolate rotations along the shortest arc; when
            False, Euler angles are interpolated one by one.
    """
    td_min: float = -0.05
    td_max: float = 0.05
    resolution: float = 0.001
    refinement_passes: int = 20
    geodesic: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (np.isfinite(self.td_min) and np.isfinite(self.td_max)):
            raise InvalidInputError("the time offset range must be finite")
        if not (self.td_min <= 0.0 <= self.td_max) or self.td_min == self.td_max:
            raise InvalidInputError(f"the time offset range [{self.td_min}, {self.td_max}] must contain 0")
        if not self.resolution > 0:
            raise InvalidInputError(f"resolution must be > 0, got {self.resolution!r}")
        if int(self.refinement_passes) != self.refinement_passes or self.refinement_passes < 0:
            raise InvalidInputError(f"refinement_passes must be a non-negative integer, got {self.refinement_passes!r}")

    def grid(self):
        """
        Candidate delays: the multiples of the resolution within [td_min, td_max].
        """
        first = int(np.ceil(self.td_min / self.resolution - 1e-9))
        last = int(np.floor(self.td_max / self.resolution + 1e-9))
        return np.arange(first, last + 1) * self.resolution


@dataclass
class TimeAlignResult:
    """
    Attributes:
        t_d (float): Estimated delay, seconds.
        cost (float): Cost at t_d.
        grid_td (np.ndarray): Candidate delays of the grid scan.
        grid_cost (np.ndarray): Their costs (inf where no cloud could be built).
        n_scans (int): Scans usable for every candidate.
        n_evals (int): Cost evaluations spent.
        wall_time (float): Seconds spent.
    """
    t_d: float
    cost: float
    grid_td: np.ndarray = field(repr=False)
    grid_cost: np.ndarray = field(repr=False)
    n_scans: int = 0
    n_evals: int = 0
    wall_time: float = 0.0


def _trajectory_arrays(poses):
    if not poses:
        raise InvalidInputError("the trajectory is empty")
    times = np.array([p.t for p in poses])
    if np.any(np.diff(times) <= 0):
        raise InvalidInputError("trajectory timestamps must be strictly increasing")
    vectors = np.array([p.vector for p in poses])
    covariances = np.array([p.Q for p in poses])
    return times, vectors, covariances


def interpolate_poses(poses, times, geodesic=True):
    """
    Poses at arbitrary timestamps inside a trajectory.

    Translations and covariances are interpolated linearly (covariances then
    clamped to PSD). Rotations follow the shortest arc between the two
    bracketing orientations, or each Euler angle is interpolated along its
    shortest wrap when geodesic is False. A time equal to a trajectory
    timestamp returns that pose unchanged.

    Args:
        poses (list[Pose]): Trajectory, strictly increasing in time.
        times (array-like): Requested timestamps.
        geodesic (bool): Rotation interpolation mode.

    Returns:
        list[Pose]: One pose per requested time, stamped with that time.

    Raises:
        ExtrapolationError: If a time lies outside [t_first, t_last].
    """
    traj_t, vectors, covariances = _trajectory_arrays(poses)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    outside = (times < traj_t[0]) | (times > traj_t[-1]) | ~np.isfinite(times)
    if np.any(outside):
        t = float(times[np.argmax(outside)])
        raise ExtrapolationError(
            f"t={t!r} lies outside the trajectory [{traj_t[0]!r}, {traj_t[-1]!r}]", t=t)
    if len(traj_t) == 1:
        return [poses[0] for _ in times]

    lower = np.clip(np.searchsorted(traj_t, times, side='right') - 1, 0, len(traj_t) - 2)
    upper = lower + 1
    alpha = (times - traj_t[lower]) / (traj_t[upper] - traj_t[lower])

    translation = (1.0 - alpha)[:, None] * vectors[lower, :3] + alpha[:, None] * vectors[upper, :3]
    if geodesic:
        keys = Rotation.from_euler(EULER_SEQUENCE, vectors[:, [5, 4, 3]])
        ypr = Slerp(traj_t, keys)(times).as_euler(EULER_SEQUENCE)
        angles = ypr[:, ::-1]
    else:
        delta = wrap_angle(vectors[upper, 3:] - vectors[lower, 3:])
        angles = wrap_angle(vectors[lower, 3:] + alpha[:, None] * delta)
    Q = (1.0 - alpha)[:, None, None] * covariances[lower] + alpha[:, None, None] * covariances[upper]
    if np.any(Q):
        Q = clamp_psd(Q)

    result = []
    for n, t in enumerate(times):
        if t == traj_t[lower[n]]:
            result.append(poses[lower[n]])
        elif t == traj_t[upper[n]]:
            result.append(poses[upper[n]])
        else:
            result.append(Pose.from_vector(t, np.concatenate([translation[n], angles[n]]), Q=Q[n]))
    return result


def interpolate_pose(poses, t, geodesic=True):
    """
    The pose at time t; see interpolate_poses.
    """
    return interpolate_poses(poses, [t], geodesic=geodesic)[0]


def align_to_trajectory(scans, poses, t_d=0.0, geodesic=True):
    """
    Pairs every scan with a pose at its delay-corrected timestamp.

    Scan timestamps are shifted by -t_d, scans falling outside the trajectory
    are dropped (never extrapolated), and poses are interpolated at the
    shifted times.

    Returns:
        tuple: (scans, poses), index-aligned with identical timestamps.
    """
    traj_t = np.array([p.t for p in poses])
    if len(traj_t) == 0:
        return [], []
    shifted_scans = []
    for scan in scans:
        t = scan.t - t_d
        if traj_t[0] <= t <= traj_t[-1]:
            shifted_scans.append(Scan(t, scan.points, scan.valid))
    dropped = len(scans) - len(shifted_scans)
    if dropped:
        logger.debug("dropped %d scans outside the trajectory for t_d=%.6f", dropped, t_d)
    if not shifted_scans:
        return [], []
    shifted_poses = interpolate_poses(poses, [s.t for s in shifted_scans], geodesic=geodesic)
    return shifted_scans, shifted_poses


def pair_scans_with_poses(scans, poses, geodesic=True):
    """
    Returns scans and poses unchanged when already paired by timestamp,
    otherwise pairs them assuming no delay.
    """
    try:
        check_alignment(scans, poses)
        return list(scans), list(poses)
    except AlignmentError:
        logger.info("scan and pose timestamps differ: interpolating poses at the scan times")
        return align_to_trajectory(scans, poses, 0.0, geodesic=geodesic)


def usable_scans(scans, poses, td_min, td_max):
    """
    Scans whose shifted timestamp stays inside the trajectory for every delay in [td_min, td_max].

    Using one common subset keeps the number of mixture components, and so the
    cost scale, identical across candidates.
    """
    if not poses:
        return []
    t_first, t_last = poses[0].t, poses[-1].t
    return [s for s in scans if s.t - td_max >= t_first and s.t - td_min <= t_last]


def time_offset_objective(scans, poses, params, cloud_cfg, geodesic=True, mode='pruned'):
    """
    The cost as a function of the delay t_d, for fixed spatial parameters.

    Returns inf for a delay that leaves no usable point.
    """
    def objective(t_d):
        shifted_scans, shifted_poses = align_to_trajectory(scans, poses, float(t_d), geodesic)
        if not shifted_scans:
            return np.inf
        try:
            return rqe_cost(CloudBuilder(shifted_scans, shifted_poses, cloud_cfg).build(params), cloud_cfg, mode)
        except EmptyCloudError:
            return np.inf
    return objective


def time_align(scans, poses, fixed_params, cfg=None, cloud_cfg=None, mode='pruned'):
    """
    Estimates the lidar delay by a 1D entropy scan.

    Args:
        scans (list[Scan]): Lidar scans with their recorded timestamps.
        poses (list[Pose]): Base-sensor trajectory.
        fixed_params (CalibParams): Spatial calibration held fixed.
        cfg (TimeAlignConfig): Grid and refinement settings.
        cloud_cfg (CloudConfig): Cloud and cost settings.
        mode (str): 'pruned' or 'exact' cost.

    Returns:
        TimeAlignResult: The argmin delay and the grid curve.

    Raises:
        TimeAlignmentError: If no candidate delay can be evaluated.
    """
    cfg = cfg or TimeAlignConfig()
    cloud_cfg = cloud_cfg or CloudConfig()
    start = time.perf_counter()
    grid = cfg.grid()
    subset = usable_scans(scans, poses, grid[0], grid[-1])
    if not subset:
        raise TimeAlignmentError("no scan stays inside the trajectory over the whole time offset range")
    objective = time_offset_objective(subset, poses, fixed_params, cloud_cfg, cfg.geodesic, mode)
    costs = np.array([objective(t_d) for t_d in grid])
    n_evals = len(grid)
    if not np.any(np.isfinite(costs)):
        raise TimeAlignmentError("every candidate time offset left an empty cloud")

    best = int(np.argmin(costs))
    t_d, cost = float(grid[best]), float(costs[best])
    if cfg.refinement_passes > 0 and 0 < best < len(grid) - 1:
        try:
            refined = minimize_scalar(
                objective, bracket=(grid[best - 1], grid[best], grid[best + 1]), method='golden',
                options={'maxiter': int(cfg.refinement_passes), 'xtol': 1e-9})
            n_evals += int(refined.nfev)
            if grid[best - 1] <= refined.x <= grid[best + 1] and refined.fun < cost:
                t_d, cost = float(refined.x), float(refined.fun)
        except ValueError:
            # ties with a neighbouring cell: no strict bracket, keep the grid optimum
            logger.debug("golden-section refinement skipped: the grid optimum is not strictly bracketed")

    result = TimeAlignResult(
        t_d=t_d, cost=cost, grid_td=grid, grid_cost=costs, n_scans=len(subset),
        n_evals=n_evals, wall_time=time.perf_counter() - start)
    logger.info("time offset: t_d = %.3f ms (cost %.10g, %d evaluations)", t_d * 1e3, cost, n_evals)
    return result


def calibrate_with_time(scans, poses, space, opt_cfg=None, ta_cfg=None, cloud_cfg=None, mode='pruned',
                        on_aligned=None):
    """
    Temporal pre-calibration followed by the spatial calibration.

    The delay is estimated with the spatial parameters held at the seed, the
    scans are shifted by it and paired with interpolated poses, and the
    Sim(3) search then runs on the re-aligned data.

    on_aligned, when given, is called with the re-aligned (scans, poses)
    before the spatial search.

    Returns:
        CalibResult: With t_d set and a 'time_align' stage summary.
    """
    ta_cfg = ta_cfg or TimeAlignConfig()
    opt_cfg = opt_cfg or OptimizerConfig()
    cloud_cfg = cloud_cfg or CloudConfig()
    alignment = time_align(scans, poses, space.seed_params, ta_cfg, cloud_cfg, mode)
    aligned_scans, aligned_poses = align_to_trajectory(scans, poses, alignment.t_d, ta_cfg.geodesic)
    if on_aligned is not None:
        on_aligned(aligned_scans, aligned_poses)
    result = calibrate(aligned_scans, aligned_poses, space, opt_cfg, cloud_cfg, mode)
    result.t_d = alignment.t_d
    result.stages = {
        'time_align': {'evals': alignment.n_evals, 'wall_time': alignment.wall_time,
                       'cost': alignment.cost, 'n_scans': alignment.n_scans},
        **result.stages,
    }
    result.config['time_align'] = dict(vars(ta_cfg))
    return result
