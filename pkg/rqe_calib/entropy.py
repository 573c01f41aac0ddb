"""
Entropy Module

Builds the Gaussian mixture point cloud from scans, poses and candidate
calibration parameters, and evaluates the pairwise Renyi Quadratic Entropy
cost

    cost = - sum_{i=1..M} sum_{j=i..M} N(x_i - x_j, Sigma_i + Sigma_j + 2 sigma^2 I)

either over all pairs ('exact') or over the pairs closer than the pruning
bound ('pruned'), found with a k-d tree radius query.

The pair sums go through math.fsum over a fixed block order, so a given cloud
and config always produce the same bits, whatever the number of workers.
"""

import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from .errors import AlignmentError, EmptyCloudError, InvalidInputError
from .geometry import WorldPoint, lift_points, propagate_covariances, validate_covariance

logger = logging.getLogger(__name__)

MODES = ('exact', 'pruned')
PRUNE_BOUNDS = ('stddev', 'variance')
# pairs evaluated per block in exact mode
EXACT_BLOCK_PAIRS = 1 << 20


@dataclass
class CloudConfig:
    """
    Settings of the point cloud and of its cost.

    Attributes:
        sigma_kernel (float): Isotropic kernel standard deviation sigma, metres.
        k_prune (float): Pruning factor k >= 1.
        subsample_stride (int): Keep every n-th valid lidar point.
        max_points (int): Cap on the number of mixture components.
        prune_bound (str): 'stddev' drops pairs farther than 2k sqrt(max lambda_1 + sigma^2);
            'variance' uses the literal 2k (max lambda_1 + sigma^2).
        freeze_covariance (bool): Compute Sigma_i once, at the first parameters
            a CloudBuilder sees, instead of for every candidate.
        range_min, range_max (float): Optional lidar range window, metres;
            valid returns outside it are left out of the cloud.
        workers (int): Threads used by the pair sums.
        chunk_size (int): Query points whose neighbour counts are taken at once.
        block_pairs (int): Neighbours gathered per block of the pruned sum;
            bounds its memory. A query with more neighbours is a block on its own.
    """
    sigma_kernel: float = 0.05
    k_prune: float = 3.0
    subsample_stride: int = 1
    max_points: int = 2_000_000
    prune_bound: str = 'stddev'
    freeze_covariance: bool = False
    range_min: float = None
    range_max: float = None
    workers: int = 1
    chunk_size: int = 4096
    block_pairs: int = 1 << 21

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (np.isfinite(self.sigma_kernel) and self.sigma_kernel > 0):
            raise InvalidInputError(f"sigma_kernel must be > 0, got {self.sigma_kernel!r}")
        if not self.k_prune >= 1:
            raise InvalidInputError(f"k_prune must be >= 1, got {self.k_prune!r}")
        if int(self.subsample_stride) != self.subsample_stride or self.subsample_stride < 1:
            raise InvalidInputError(f"subsample_stride must be a positive integer, got {self.subsample_stride!r}")
        if int(self.max_points) != self.max_points or self.max_points < 1:
            raise InvalidInputError(f"max_points must be a positive integer, got {self.max_points!r}")
        if self.prune_bound not in PRUNE_BOUNDS:
            raise InvalidInputError(f"prune_bound must be one of {PRUNE_BOUNDS}, got {self.prune_bound!r}")
        if int(self.workers) != self.workers or self.workers < 1:
            raise InvalidInputError(f"workers must be a positive integer, got {self.workers!r}")
        if int(self.chunk_size) != self.chunk_size or self.chunk_size < 1:
            raise InvalidInputError(f"chunk_size must be a positive integer, got {self.chunk_size!r}")
        if int(self.block_pairs) != self.block_pairs or self.block_pairs < 1:
            raise InvalidInputError(f"block_pairs must be a positive integer, got {self.block_pairs!r}")
        for name in ('range_min', 'range_max'):
            value = getattr(self, name)
            if value is not None and not (np.isfinite(value) and value >= 0):
                raise InvalidInputError(f"{name} must be a finite distance >= 0, got {value!r}")
        if self.range_min is not None and self.range_max is not None and self.range_min >= self.range_max:
            raise InvalidInputError(f"range_min {self.range_min!r} must be below range_max {self.range_max!r}")

    def prune_radius(self, lambda_max):
        """
        Distance at or beyond which a pair is dropped, given max(lambda_1(Sigma_i), lambda_1(Sigma_j)).
        """
        spread = np.asarray(lambda_max, dtype=float) + self.sigma_kernel ** 2
        if self.prune_bound == 'stddev':
            spread = np.sqrt(spread)
        return 2.0 * self.k_prune * spread


class GmmCloud:
    """
    The reconstructed point cloud seen as a uniformly weighted Gaussian mixture.

    Attributes:
        positions (np.ndarray): (M, 3) component centroids, metres.
        covariances (np.ndarray): (M, 3, 3) propagated covariances Sigma_i.
        lambda_max (np.ndarray): (M,) largest eigenvalue of each Sigma_i.
        times (np.ndarray): (M,) timestamps of the originating scans.
        scan_index (np.ndarray): (M,) scan index k of each point.
        beam_index (np.ndarray): (M,) beam index n of each point.
        isotropic (bool): True when every Sigma_i is zero.

    Methods:
        index: The k-d tree over positions, built on first use.
        points: The components as WorldPoint objects.
    """
    def __init__(self, positions, covariances=None, times=None, scan_index=None, beam_index=None):
        self.positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        M = len(self.positions)
        if covariances is None:
            covariances = np.zeros((M, 3, 3))
        self.covariances = np.asarray(covariances, dtype=float).reshape(M, 3, 3)
        self.times = np.zeros(M) if times is None else np.asarray(times, dtype=float)
        self.scan_index = np.full(M, -1) if scan_index is None else np.asarray(scan_index)
        self.beam_index = np.full(M, -1) if beam_index is None else np.asarray(beam_index)
        self.isotropic = not np.any(self.covariances)
        if self.isotropic or M == 0:
            self.lambda_max = np.zeros(M)
        else:
            self.lambda_max = np.clip(np.linalg.eigvalsh(self.covariances)[:, -1], 0.0, None)

    def __len__(self):
        return len(self.positions)

    @cached_property
    def index(self):
        return cKDTree(self.positions)

    @property
    def points(self):
        return [
            WorldPoint(position=self.positions[i], sigma=self.covariances[i], t=float(self.times[i]),
                       k=int(self.scan_index[i]), n=int(self.beam_index[i]))
            for i in range(len(self))
        ]

    @classmethod
    def from_points(cls, points):
        """
        Builds a cloud from WorldPoint objects.
        """
        points = list(points)
        if not points:
            return cls(np.zeros((0, 3)))
        return cls(
            positions=[p.position for p in points],
            covariances=[validate_covariance(p.sigma, 3, name="point covariance") for p in points],
            times=[p.t for p in points],
            scan_index=[-1 if p.k is None else p.k for p in points],
            beam_index=[-1 if p.n is None else p.n for p in points],
        )


class CloudBuilder:
    """
    Rebuilds the Gaussian mixture for any calibration candidate.

    The scans are flattened once: valid returns inside the range window are
    gathered, subsampled with a deterministic stride and capped at
    max_points, so that every rebuild during an optimization works on the
    same set of lidar returns.

    Args:
        scans (list[Scan]): Lidar scans.
        poses (list[Pose]): Egomotion poses, index-aligned with the scans by timestamp.
        cfg (CloudConfig): Cloud settings.

    Raises:
        AlignmentError: If scans and poses do not pair up one-to-one by timestamp.
    """
    def __init__(self, scans, poses, cfg=None):
        self.cfg = cfg or CloudConfig()
        scans = list(scans)
        poses = list(poses)
        check_alignment(scans, poses)
        self.pose_vectors = np.array([p.vector for p in poses]).reshape(-1, 6)
        self.pose_covariances = np.array([p.Q for p in poses]).reshape(-1, 6, 6)
        self.pose_times = np.array([p.t for p in poses])

        low = -np.inf if self.cfg.range_min is None else self.cfg.range_min
        high = np.inf if self.cfg.range_max is None else self.cfg.range_max
        xy, scan_index, beam_index = [], [], []
        dropped = 0
        for k, scan in enumerate(scans):
            ranges = np.hypot(scan.points[:, 0], scan.points[:, 1])
            with np.errstate(invalid='ignore'):
                in_window = (ranges >= low) & (ranges <= high)
            dropped += int(np.count_nonzero(scan.valid & ~in_window))
            beams = np.flatnonzero(scan.valid & in_window)
            xy.append(scan.points[beams])
            beam_index.append(beams)
            scan_index.append(np.full(len(beams), k))
        if xy:
            xy = np.concatenate(xy)
            scan_index = np.concatenate(scan_index)
            beam_index = np.concatenate(beam_index)
        else:
            xy = np.zeros((0, 2))
            scan_index = beam_index = np.zeros(0, dtype=int)
        if dropped:
            logger.info("dropped %d valid returns outside the range window [%s, %s]",
                        dropped, self.cfg.range_min, self.cfg.range_max)

        keep = np.arange(0, len(xy), int(self.cfg.subsample_stride))
        if len(keep) > self.cfg.max_points:
            logger.warning("capping cloud at %d of %d points", self.cfg.max_points, len(keep))
            keep = keep[np.unique(np.linspace(0, len(keep) - 1, self.cfg.max_points).round().astype(int))]
        self.xy = xy[keep]
        self.scan_index = scan_index[keep]
        self.beam_index = beam_index[keep]
        self.times = self.pose_times[self.scan_index] if len(keep) else np.zeros(0)
        self._frozen_covariances = None
        if len(self.xy) == 0:
            logger.warning("no valid lidar returns: the cloud is empty")

    def __len__(self):
        return len(self.xy)

    def covariances(self, params):
        if self.cfg.freeze_covariance and self._frozen_covariances is not None:
            return self._frozen_covariances
        covariances = propagate_covariances(
            self.xy, self.pose_vectors, self.pose_covariances, params, pose_index=self.scan_index)
        if self.cfg.freeze_covariance:
            self._frozen_covariances = covariances
        return covariances

    def build(self, params):
        """
        Lifts every kept return with `params`.

        Returns:
            GmmCloud: The mixture for this calibration candidate.
        """
        if len(self.xy) == 0:
            return GmmCloud(np.zeros((0, 3)))
        positions = lift_points(self.xy, self.pose_vectors, params, pose_index=self.scan_index)
        return GmmCloud(positions, self.covariances(params), self.times, self.scan_index, self.beam_index)


def check_alignment(scans, poses):
    """
    Raises AlignmentError unless scans[i].t == poses[i].t for every i.
    """
    for i, (scan, pose) in enumerate(zip(scans, poses)):
        if scan.t != pose.t:
            raise AlignmentError(
                f"scan {i} at t={scan.t!r} is paired with a pose at t={pose.t!r}", index=i)
    if len(scans) != len(poses):
        i = min(len(scans), len(poses))
        raise AlignmentError(f"{len(scans)} scans but {len(poses)} poses; first unpaired index {i}", index=i)


def build_cloud(scans, poses, params, cfg=None):
    """
    Builds the Gaussian mixture point cloud for one calibration candidate.

    Args:
        scans (list[Scan]): Lidar scans.
        poses (list[Pose]): Index-aligned poses.
        params (CalibParams): Candidate calibration.
        cfg (CloudConfig): Cloud settings.

    Returns:
        GmmCloud: The cloud; empty (with a logged warning) when no return is valid.
    """
    return CloudBuilder(scans, poses, cfg).build(params)


def gaussian_terms(diff, cov):
    """
    Trivariate normal densities N(diff; 0, cov), vectorized.

    Uses the closed-form 3x3 determinant and adjugate of the (symmetric)
    covariances.

    Args:
        diff (np.ndarray): (P, 3) difference vectors.
        cov (np.ndarray): (P, 3, 3) symmetric positive definite covariances.

    Returns:
        np.ndarray: (P,) densities.
    """
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 0, 2]
    d, e, f = cov[:, 1, 1], cov[:, 1, 2], cov[:, 2, 2]
    A00 = d * f - e * e
    A01 = c * e - b * f
    A02 = b * e - c * d
    A11 = a * f - c * c
    A12 = b * c - a * e
    A22 = a * d - b * b
    det = a * A00 + b * A01 + c * A02
    x, y, z = diff[:, 0], diff[:, 1], diff[:, 2]
    quad = (A00 * x * x + A11 * y * y + A22 * z * z
            + 2.0 * (A01 * x * y + A02 * x * z + A12 * y * z)) / det
    return np.exp(-0.5 * quad) / np.sqrt((2.0 * np.pi) ** 3 * det)


def pairwise_term(p_i, p_j, sigma):
    """
    Pairwise entropy contribution N(x_i - x_j, Sigma_i + Sigma_j + 2 sigma^2 I).

    Args:
        p_i, p_j (WorldPoint): The two mixture components.
        sigma (float): Kernel standard deviation, metres.

    Returns:
        float: The non-negative density value, symmetric in (i, j).
    """
    if not (np.isfinite(sigma) and sigma > 0):
        raise InvalidInputError(f"sigma must be > 0, got {sigma!r}")
    diff = np.asarray(p_i.position, dtype=float) - np.asarray(p_j.position, dtype=float)
    cov = np.asarray(p_i.sigma, dtype=float) + np.asarray(p_j.sigma, dtype=float) + 2.0 * sigma ** 2 * np.eye(3)
    value = gaussian_terms(diff[None, :], cov[None, :, :])[0]
    if not np.isfinite(value):
        raise InvalidInputError("pairwise term is not finite")
    return float(value)


def _pair_terms(cloud, i, j, sigma):
    diff = cloud.positions[i] - cloud.positions[j]
    if cloud.isotropic:
        norm = (4.0 * np.pi * sigma ** 2) ** -1.5
        return norm * np.exp(-np.einsum('ij,ij->i', diff, diff) / (4.0 * sigma ** 2))
    cov = cloud.covariances[i] + cloud.covariances[j]
    cov[:, 0, 0] += 2.0 * sigma ** 2
    cov[:, 1, 1] += 2.0 * sigma ** 2
    cov[:, 2, 2] += 2.0 * sigma ** 2
    return gaussian_terms(diff, cov)


def _exact_blocks(cloud, cfg):
    M = len(cloud)
    rows = max(1, EXACT_BLOCK_PAIRS // max(M, 1))
    for start in range(0, M, rows):
        i = np.arange(start, min(start + rows, M))
        ii, jj = np.meshgrid(i, np.arange(M), indexing='ij')
        upper = jj >= ii
        terms = _pair_terms(cloud, ii[upper], jj[upper], cfg.sigma_kernel)
        yield math.fsum(terms), len(terms)


def _query_blocks(cloud, cfg, radii):
    """
    Splits the query points into contiguous [start, stop) blocks holding at
    most block_pairs neighbours each, from neighbour counts taken chunk_size
    queries at a time.
    """
    M = len(cloud)
    for chunk_start in range(0, M, cfg.chunk_size):
        chunk_stop = min(chunk_start + cfg.chunk_size, M)
        counts = cloud.index.query_ball_point(
            cloud.positions[chunk_start:chunk_stop], radii[chunk_start:chunk_stop], return_length=True)
        start, load = chunk_start, 0
        for offset, count in enumerate(counts.tolist()):
            if load and load + count > cfg.block_pairs:
                yield start, chunk_start + offset
                start, load = chunk_start + offset, 0
            load += count
        yield start, chunk_stop


def _pruned_block(cloud, cfg, radii, start, stop):
    """
    Sum and count of the pairs owned by the query points [start, stop).

    A pair belongs to the point with the larger lambda_1 (lower index on ties);
    the owner's radius is the exact bound of the pair, so querying each point
    with its own radius finds every kept pair exactly once.
    """
    i_query = np.arange(start, stop)
    neighbors = cloud.index.query_ball_point(cloud.positions[i_query], radii[i_query], return_sorted=True)
    counts = np.fromiter((len(n) for n in neighbors), dtype=np.intp, count=len(i_query))
    if counts.sum() == 0:
        return 0.0, 0
    i = np.repeat(i_query, counts)
    j = np.fromiter(itertools.chain.from_iterable(neighbors), dtype=np.intp, count=int(counts.sum()))
    del neighbors
    lam = cloud.lambda_max
    owned = (lam[i] > lam[j]) | ((lam[i] == lam[j]) & (i <= j))
    i, j = i[owned], j[owned]
    diff = cloud.positions[i] - cloud.positions[j]
    inside = np.sqrt(np.einsum('ij,ij->i', diff, diff)) < radii[i]
    terms = _pair_terms(cloud, i[inside], j[inside], cfg.sigma_kernel)
    return math.fsum(terms), len(terms)


def _pruned_blocks(cloud, cfg):
    radii = cfg.prune_radius(cloud.lambda_max)
    blocks = _query_blocks(cloud, cfg, radii)
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            # map yields in submission order, so the reduction order is fixed
            yield from pool.map(lambda block: _pruned_block(cloud, cfg, radii, *block), blocks)
    else:
        for start, stop in blocks:
            yield _pruned_block(cloud, cfg, radii, start, stop)


def _pair_sum(cloud, cfg, mode):
    """
    Returns (sum of pair terms over j >= i, number of pairs summed).

    Each block is summed exactly rounded and the block sums are combined with
    fsum; block boundaries depend only on the cloud and cfg, never on workers.
    """
    if mode not in MODES:
        raise InvalidInputError(f"mode must be one of {MODES}, got {mode!r}")
    if len(cloud) == 0:
        raise EmptyCloudError("cannot evaluate the entropy of an empty cloud")
    blocks = _exact_blocks(cloud, cfg) if mode == 'exact' else _pruned_blocks(cloud, cfg)
    partials, visited = [], 0
    for partial, count in blocks:
        partials.append(partial)
        visited += count
    total = math.fsum(partials)
    if not math.isfinite(total):
        raise InvalidInputError("entropy sum is not finite")
    return total, visited


def rqe_cost(cloud, cfg=None, mode='pruned'):
    """
    The simplified RQE objective: minus the sum of pair terms over j >= i.

    Self terms (i = j) are included. Lower is crisper.

    Args:
        cloud (GmmCloud): The mixture.
        cfg (CloudConfig): Kernel and pruning settings.
        mode (str): 'exact' for all pairs, 'pruned' to skip pairs beyond the bound.

    Returns:
        float: The cost.

    Raises:
        EmptyCloudError: If the cloud has no point.
    """
    cfg = cfg or CloudConfig()
    total, _ = _pair_sum(cloud, cfg, mode)
    return -total


def renyi_entropy(cloud, cfg=None, mode='pruned'):
    """
    The Renyi Quadratic Entropy H = -log(S / M^2) of the mixture.

    S is the full double sum over ordered pairs, recovered from the j >= i
    sum as 2 * sum - (self terms).
    """
    cfg = cfg or CloudConfig()
    upper, _ = _pair_sum(cloud, cfg, mode)
    idx = np.arange(len(cloud))
    self_terms = math.fsum(_pair_terms(cloud, idx, idx, cfg.sigma_kernel))
    M = len(cloud)
    return -math.log((2.0 * upper - self_terms) / M ** 2)


@dataclass
class EntropyReport:
    """
    Diagnostics of one cost evaluation.

    Attributes:
        n_points (int): M.
        pairs_visited (int): Pairs summed (self pairs included).
        pairs_total (int): M (M + 1) / 2.
        prune_ratio (float): Fraction of pairs skipped.
        cost (float): The cost, or None when undefined.
        cost_defined (bool): False for an empty cloud.
        wall_time (float): Seconds spent.
        mode (str): Evaluation mode.
    """
    n_points: int
    pairs_visited: int
    pairs_total: int
    prune_ratio: float
    cost: float
    cost_defined: bool
    wall_time: float
    mode: str = 'pruned'


def entropy_report(cloud, cfg=None, mode='pruned'):
    """
    Evaluates the cost and reports pair counts and timing.

    Returns:
        EntropyReport: cost_defined is False (and cost None) for an empty cloud.
    """
    cfg = cfg or CloudConfig()
    M = len(cloud)
    start = time.perf_counter()
    if M == 0:
        return EntropyReport(0, 0, 0, 0.0, None, False, time.perf_counter() - start, mode)
    total, visited = _pair_sum(cloud, cfg, mode)
    elapsed = time.perf_counter() - start
    pairs_total = M * (M + 1) // 2
    report = EntropyReport(
        n_points=M,
        pairs_visited=visited,
        pairs_total=pairs_total,
        prune_ratio=1.0 - visited / pairs_total,
        cost=-total,
        cost_defined=True,
        wall_time=elapsed,
        mode=mode,
    )
    logger.info("entropy: M=%d, %d pairs (%.4f pruned), cost=%.10g in %.3fs",
                M, visited, report.prune_ratio, report.cost, elapsed)
    return report
