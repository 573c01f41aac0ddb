"""
Simulator Module

Closed-loop validation data: analytic scenes built from plane patches,
triangles, open cylinders and spheres; sinusoidal 6-DOF base-sensor
trajectories; a raycasting 2D lidar; Gaussian pose and range noise; and
dataset bundles carrying the ground-truth calibration.

Five scenes of increasing difficulty are provided: simple_room,
parking_lot, plane_city, quadratic_forest and triangle_array. Their
dimensions are documented defaults, not measurements of any real place.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidInputError, TrajectoryError, UnknownEnvironmentError
from .geometry import CalibParams, Pose, Scan, Transform, calib_to_transform, pose_to_transform

logger = logging.getLogger(__name__)

RAY_EPS = 1e-9
PARALLEL_EPS = 1e-12

DEFAULT_TRUTH = CalibParams(0.1, -0.05, 0.2, np.radians(5.0), np.radians(80.0), np.radians(-10.0), 1.0)


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def _rows_dot(a, b):
    return np.einsum('...i,...i->...', a, b)


class Primitive:
    """
    Base class of the raycastable scene elements.

    Methods:
        intersect(origins, directions): Distance to the nearest hit along each
            unit ray, inf on a miss.
        distance(points): Unsigned distance from each point to the surface.
    """
    kind = None

    def intersect(self, origins, directions):
        raise NotImplementedError

    def distance(self, points):
        raise NotImplementedError


class Plane(Primitive):
    """
    A rectangular plane patch.

    Args:
        center (array-like): Patch center.
        normal (array-like): Patch normal.
        u_axis (array-like): In-plane direction of the first half extent.
        half_u, half_v (float): Half extents along u and along normal x u.
    """
    kind = 'plane'

    def __init__(self, center, normal, u_axis, half_u, half_v):
        self.center = np.asarray(center, dtype=float)
        self.normal = _unit(normal)
        u_axis = np.asarray(u_axis, dtype=float)
        self.u = _unit(u_axis - np.dot(u_axis, self.normal) * self.normal)
        self.v = np.cross(self.normal, self.u)
        self.half_u = float(half_u)
        self.half_v = float(half_v)

    def intersect(self, origins, directions):
        denom = directions @ self.normal
        parallel = np.abs(denom) < PARALLEL_EPS
        with np.errstate(divide='ignore', invalid='ignore'):
            t = ((self.center - origins) @ self.normal) / np.where(parallel, 1.0, denom)
        hits = origins + t[:, None] * directions
        local = hits - self.center
        inside = (np.abs(local @ self.u) <= self.half_u) & (np.abs(local @ self.v) <= self.half_v)
        return np.where(~parallel & (t > RAY_EPS) & inside, t, np.inf)

    def distance(self, points):
        local = np.asarray(points, dtype=float) - self.center
        du = np.clip(local @ self.u, -self.half_u, self.half_u)
        dv = np.clip(local @ self.v, -self.half_v, self.half_v)
        nearest = self.center + du[:, None] * self.u + dv[:, None] * self.v
        return np.linalg.norm(points - nearest, axis=1)


def _point_segment_distance(points, a, b):
    # points (P, 1, 3); a, b (T, 3)
    ab = b - a
    t = np.clip(_rows_dot(points - a, ab) / np.maximum(_rows_dot(ab, ab), PARALLEL_EPS), 0.0, 1.0)
    return np.linalg.norm(points - (a + t[..., None] * ab), axis=-1)


class Triangles(Primitive):
    """
    A triangle soup.

    Args:
        vertices (array-like): (T, 3, 3) triangle corners.
    """
    kind = 'triangles'

    def __init__(self, vertices):
        self.vertices = np.asarray(vertices, dtype=float).reshape(-1, 3, 3)

    def __len__(self):
        return len(self.vertices)

    def intersect(self, origins, directions):
        # Moller-Trumbore over every ray/triangle pair
        v0, v1, v2 = self.vertices[:, 0], self.vertices[:, 1], self.vertices[:, 2]
        e1, e2 = v1 - v0, v2 - v0
        pvec = np.cross(directions[:, None, :], e2[None, :, :])
        det = _rows_dot(e1[None, :, :], pvec)
        parallel = np.abs(det) < PARALLEL_EPS
        inv_det = 1.0 / np.where(parallel, 1.0, det)
        tvec = origins[:, None, :] - v0[None, :, :]
        u = _rows_dot(tvec, pvec) * inv_det
        qvec = np.cross(tvec, e1[None, :, :])
        v = _rows_dot(directions[:, None, :], qvec) * inv_det
        t = _rows_dot(e2[None, :, :], qvec) * inv_det
        hit = ~parallel & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > RAY_EPS)
        return np.where(hit, t, np.inf).min(axis=1, initial=np.inf)

    def distance(self, points):
        points = np.asarray(points, dtype=float)[:, None, :]
        v0, v1, v2 = self.vertices[:, 0], self.vertices[:, 1], self.vertices[:, 2]
        normal = np.cross(v1 - v0, v2 - v0)
        normal /= np.linalg.norm(normal, axis=1, keepdims=True)
        height = _rows_dot(points - v0, normal)
        projected = points - height[..., None] * normal
        # the projection is inside when it lies on the inner side of every edge
        inside = np.ones(height.shape, dtype=bool)
        for a, b in ((v0, v1), (v1, v2), (v2, v0)):
            inside &= _rows_dot(np.cross(b - a, projected - a), normal) >= 0.0
        edges = np.minimum.reduce([
            _point_segment_distance(points, v0, v1),
            _point_segment_distance(points, v1, v2),
            _point_segment_distance(points, v2, v0),
        ])
        return np.where(inside, np.abs(height), edges).min(axis=1, initial=np.inf)


def _nearest_root(a, b, c):
    """
    Smallest root > RAY_EPS of a t^2 + b t + c, inf where none; numerically stable form.
    """
    disc = b * b - 4.0 * a * c
    real = (disc >= 0.0) & (a > PARALLEL_EPS)
    sqrt_disc = np.sqrt(np.where(real, disc, 0.0))
    q = -0.5 * (b + np.where(b >= 0.0, sqrt_disc, -sqrt_disc))
    with np.errstate(divide='ignore', invalid='ignore'):
        t1 = q / np.where(real, a, 1.0)
        t2 = c / np.where(q != 0.0, q, np.inf)
    roots = np.sort(np.stack([t1, t2], axis=-1), axis=-1)
    roots = np.where(real[:, None] & (roots > RAY_EPS), roots, np.inf)
    return roots


class Cylinder(Primitive):
    """
    An open finite cylinder (lateral surface only).

    Args:
        base (array-like): Center of the bottom circle.
        axis (array-like): Axis direction.
        radius (float): Radius.
        height (float): Length along the axis.
    """
    kind = 'cylinder'

    def __init__(self, base, axis, radius, height):
        self.base = np.asarray(base, dtype=float)
        self.axis = _unit(axis)
        self.radius = float(radius)
        self.height = float(height)

    def intersect(self, origins, directions):
        rel = origins - self.base
        d_perp = directions - (directions @ self.axis)[:, None] * self.axis
        r_perp = rel - (rel @ self.axis)[:, None] * self.axis
        roots = _nearest_root(_rows_dot(d_perp, d_perp), 2.0 * _rows_dot(r_perp, d_perp),
                              _rows_dot(r_perp, r_perp) - self.radius ** 2)
        finite = np.isfinite(roots)
        along = (rel @ self.axis)[:, None] + np.where(finite, roots, 0.0) * (directions @ self.axis)[:, None]
        roots = np.where(finite & (along >= 0.0) & (along <= self.height), roots, np.inf)
        return roots.min(axis=1)

    def distance(self, points):
        rel = np.asarray(points, dtype=float) - self.base
        along = rel @ self.axis
        radial = np.linalg.norm(rel - along[:, None] * self.axis, axis=1) - self.radius
        axial = np.maximum.reduce([np.zeros_like(along), along - self.height, -along])
        return np.hypot(radial, axial)


class Sphere(Primitive):
    """
    A sphere.
    """
    kind = 'sphere'

    def __init__(self, center, radius):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)

    def intersect(self, origins, directions):
        rel = origins - self.center
        roots = _nearest_root(_rows_dot(directions, directions), 2.0 * _rows_dot(rel, directions),
                              _rows_dot(rel, rel) - self.radius ** 2)
        return roots.min(axis=1)

    def distance(self, points):
        return np.abs(np.linalg.norm(np.asarray(points, dtype=float) - self.center, axis=1) - self.radius)


@dataclass
class TrajectorySpec:
    """
    Sinusoidal 6-DOF base-sensor motion: pose_j(t) = base_j + A_j sin(2 pi f_j t + phase_j).

    Attributes:
        duration (float): Seconds, > 0.
        base (np.ndarray): (6,) center pose (x, y, z, phi, theta, psi).
        amplitudes (np.ndarray): (6,) non-negative amplitudes, metres and radians.
        frequencies (np.ndarray): (6,) non-negative frequencies, Hz.
        phases (np.ndarray): (6,) phases, radians.
        rng_seed (int): When set, amplitudes, frequencies and phases are
            randomized from this seed before sampling (see randomized()).
    """
    duration: float
    base: np.ndarray
    amplitudes: np.ndarray
    frequencies: np.ndarray
    phases: np.ndarray = None
    rng_seed: int = None

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=float)
        self.amplitudes = np.asarray(self.amplitudes, dtype=float)
        self.frequencies = np.asarray(self.frequencies, dtype=float)
        self.phases = np.zeros(6) if self.phases is None else np.asarray(self.phases, dtype=float)
        self.validate()

    def validate(self):
        if not (np.isfinite(self.duration) and self.duration > 0):
            raise InvalidInputError(f"trajectory duration must be > 0, got {self.duration!r}")
        for name in ('base', 'amplitudes', 'frequencies', 'phases'):
            value = getattr(self, name)
            if value.shape != (6,) or not np.all(np.isfinite(value)):
                raise InvalidInputError(f"trajectory {name} must be 6 finite values")
        if np.any(self.amplitudes < 0) or np.any(self.frequencies < 0):
            raise InvalidInputError("trajectory amplitudes and frequencies must be >= 0")

    def randomized(self, rng_seed=None):
        """
        A variation of this motion: amplitudes scaled by U[0.5, 1.5],
        frequencies drawn from U[0.05, 0.4] Hz, phases from U[0, 2 pi).
        """
        seed = self.rng_seed if rng_seed is None else rng_seed
        rng = np.random.default_rng(seed)
        return replace(
            self,
            amplitudes=self.amplitudes * rng.uniform(0.5, 1.5, 6),
            frequencies=rng.uniform(0.05, 0.4, 6),
            phases=rng.uniform(0.0, 2.0 * np.pi, 6),
            rng_seed=None,
        )

    def sample(self, times):
        times = np.asarray(times, dtype=float)
        return self.base + self.amplitudes * np.sin(2.0 * np.pi * self.frequencies * times[:, None] + self.phases)


@dataclass
class Environment:
    """
    A simulation scene.

    Attributes:
        name (str): Scene name.
        primitives (list[Primitive]): Raycastable surfaces.
        free_lower, free_upper (np.ndarray): Box the base sensor may move in.
        clearance (float): Minimum distance kept from every surface.
        trajectory (TrajectorySpec): A plausible default base-sensor motion.

    Methods:
        raycast(origins, directions): Nearest hit distance per ray.
        distance(points): Distance to the nearest surface.
        contains(points): True where a point is in free space.
    """
    name: str
    primitives: list
    free_lower: np.ndarray
    free_upper: np.ndarray
    clearance: float = 0.3
    trajectory: TrajectorySpec = None

    def raycast(self, origins, directions):
        origins = np.asarray(origins, dtype=float).reshape(-1, 3)
        directions = np.asarray(directions, dtype=float).reshape(-1, 3)
        directions = directions / np.linalg.norm(directions, axis=1, keepdims=True)
        ranges = np.full(len(origins), np.inf)
        for primitive in self.primitives:
            ranges = np.minimum(ranges, primitive.intersect(origins, directions))
        return ranges

    def distance(self, points):
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        return np.minimum.reduce([p.distance(points) for p in self.primitives])

    def contains(self, points):
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        in_box = np.all((points >= self.free_lower) & (points <= self.free_upper), axis=1)
        return in_box & (self.distance(points) > self.clearance)

    def count(self, kind):
        return sum(1 for p in self.primitives if p.kind == kind)


def _room_planes(length, width, height):
    L, W, H = length, width, height
    return [
        Plane([L / 2, W / 2, 0.0], [0, 0, 1], [1, 0, 0], L / 2, W / 2),
        Plane([L / 2, W / 2, H], [0, 0, -1], [1, 0, 0], L / 2, W / 2),
        Plane([0.0, W / 2, H / 2], [1, 0, 0], [0, 1, 0], W / 2, H / 2),
        Plane([L, W / 2, H / 2], [-1, 0, 0], [0, 1, 0], W / 2, H / 2),
        Plane([L / 2, 0.0, H / 2], [0, 1, 0], [1, 0, 0], L / 2, H / 2),
        Plane([L / 2, W, H / 2], [0, -1, 0], [1, 0, 0], L / 2, H / 2),
    ]


def _indoor_trajectory(length, width, height, scale_xy=1.0):
    return TrajectorySpec(
        duration=50.0,
        base=[length / 2, width / 2, height / 2, 0.0, 0.0, 0.0],
        amplitudes=[scale_xy * length / 5, scale_xy * width / 5, height / 8,
                    np.radians(20.0), np.radians(20.0), np.radians(60.0)],
        frequencies=[0.10, 0.13, 0.17, 0.19, 0.23, 0.07],
        phases=[0.0, 1.0, 2.0, 0.5, 1.5, 2.5],
    )


def _outdoor_trajectory():
    return TrajectorySpec(
        duration=50.0,
        base=[0.0, 0.0, 1.5, 0.0, 0.0, 0.0],
        amplitudes=[1.2, 1.2, 0.3, np.radians(20.0), np.radians(20.0), np.radians(60.0)],
        frequencies=[0.10, 0.13, 0.17, 0.19, 0.23, 0.07],
        phases=[0.0, 1.0, 2.0, 0.5, 1.5, 2.5],
    )


def simple_room(length=10.0, width=8.0, height=3.0):
    """
    An enclosed box of six orthogonal planes, default 10 x 8 x 3 m.
    """
    return Environment(
        name='simple_room',
        primitives=_room_planes(length, width, height),
        free_lower=np.array([0.5, 0.5, 0.4]),
        free_upper=np.array([length - 0.5, width - 0.5, height - 0.4]),
        trajectory=_indoor_trajectory(length, width, height),
    )


def parking_lot(length=10.0, width=8.0, height=3.0, pillar_radius=0.3):
    """
    The simple room plus four floor-to-ceiling pillars.
    """
    pillars = [
        Cylinder([x, y, 0.0], [0, 0, 1], pillar_radius, height)
        for x in (length / 4, 3 * length / 4) for y in (width / 4, 3 * width / 4)
    ]
    return Environment(
        name='parking_lot',
        primitives=_room_planes(length, width, height) + pillars,
        free_lower=np.array([0.5, 0.5, 0.4]),
        free_upper=np.array([length - 0.5, width - 0.5, height - 0.4]),
        trajectory=_indoor_trajectory(length, width, height, scale_xy=0.6),
    )


def plane_city(extent=40.0):
    """
    Open ground with building facades of varying size, some occluding others.
    """
    primitives = [Plane([0.0, 0.0, 0.0], [0, 0, 1], [1, 0, 0], extent / 2, extent / 2)]
    # (bearing deg, distance m, half width m, height m)
    facades = [
        (0, 9.0, 4.0, 6.0), (40, 11.0, 3.0, 9.0), (85, 8.0, 5.0, 4.0), (130, 12.0, 4.0, 12.0),
        (175, 9.5, 3.5, 5.0), (220, 10.0, 5.0, 8.0), (265, 8.5, 3.0, 7.0), (310, 12.0, 4.5, 10.0),
        # closer, smaller panels partly hiding the facades behind them
        (20, 5.5, 1.0, 2.5), (150, 6.0, 1.2, 3.0), (250, 5.0, 0.8, 2.0),
    ]
    for bearing, dist, half_width, h in facades:
        direction = np.array([np.cos(np.radians(bearing)), np.sin(np.radians(bearing)), 0.0])
        tangent = np.array([-direction[1], direction[0], 0.0])
        center = dist * direction + [0.0, 0.0, h / 2]
        primitives.append(Plane(center, -direction, tangent, half_width, h / 2))
    return Environment(
        name='plane_city',
        primitives=primitives,
        free_lower=np.array([-3.0, -3.0, 0.5]),
        free_upper=np.array([3.0, 3.0, 2.5]),
        trajectory=_outdoor_trajectory(),
    )


def quadratic_forest(extent=40.0, trunk_radius=0.15):
    """
    Open ground with spheres mounted on top of cylinders; the ground is the only plane.
    """
    primitives = [Plane([0.0, 0.0, 0.0], [0, 0, 1], [1, 0, 0], extent / 2, extent / 2)]
    for i in range(18):
        ring = i % 3
        bearing = 2.0 * np.pi * i / 18 + 0.3 * ring
        dist = (6.0, 8.5, 11.0)[ring]
        trunk = 1.5 + 0.5 * (i % 3) + 0.25 * (i % 2)
        crown = 0.6 + 0.2 * ((i + 1) % 3)
        x, y = dist * np.cos(bearing), dist * np.sin(bearing)
        primitives.append(Cylinder([x, y, 0.0], [0, 0, 1], trunk_radius, trunk))
        primitives.append(Sphere([x, y, trunk + crown], crown))
    return Environment(
        name='quadratic_forest',
        primitives=primitives,
        free_lower=np.array([-3.0, -3.0, 0.5]),
        free_upper=np.array([3.0, 3.0, 2.5]),
        trajectory=_outdoor_trajectory(),
    )


def triangle_array(spacing=3.0, half_extent=12.0, layout_seed=7):
    """
    Open space filled with non-intersecting triangles of various sizes and orientations.

    One triangle per lattice cell, with circumradius below half the spacing so
    that no two triangles can touch; cells near the free space are left empty.
    """
    rng = np.random.default_rng(layout_seed)
    free_lower = np.array([-2.0, -2.0, 0.5])
    free_upper = np.array([2.0, 2.0, 2.5])
    coords = np.arange(-half_extent, half_extent + 1e-9, spacing)
    triangles = []
    for x in coords:
        for y in coords:
            for z in (-1.0, 1.5, 4.0):
                center = np.array([x, y, z])
                if np.all(center >= free_lower - 1.5) and np.all(center <= free_upper + 1.5):
                    continue
                radius = rng.uniform(0.5, 0.45 * spacing)
                basis = np.linalg.qr(rng.standard_normal((3, 3)))[0]
                angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, 3))
                corners = [center + radius * (np.cos(a) * basis[:, 0] + np.sin(a) * basis[:, 1]) for a in angles]
                triangles.append(corners)
    return Environment(
        name='triangle_array',
        primitives=[Triangles(triangles)],
        free_lower=free_lower,
        free_upper=free_upper,
        trajectory=_outdoor_trajectory(),
    )


ENVIRONMENTS = {
    'simple_room': simple_room,
    'parking_lot': parking_lot,
    'plane_city': plane_city,
    'quadratic_forest': quadratic_forest,
    'triangle_array': triangle_array,
}


def build_environment(name, **overrides):
    """
    Routes a scene name to its builder.

    Args:
        name (str): One of simple_room, parking_lot, plane_city, quadratic_forest, triangle_array.
        **overrides: Keyword arguments of the builder (dimensions).

    Returns:
        Environment: The scene.

    Raises:
        UnknownEnvironmentError: For any other name.
    """
    if name not in ENVIRONMENTS:
        raise UnknownEnvironmentError(f"unknown environment {name!r}; choose from {', '.join(ENVIRONMENTS)}")
    return ENVIRONMENTS[name](**overrides)


@dataclass
class LidarModel:
    """
    A planar scanning lidar.

    Attributes:
        rate (float): Scan rate, Hz.
        fov (float): Field of view, radians, centered on the lidar x axis.
        resolution (float): Angle between beams, radians.
        range_min, range_max (float): Valid range window, metres.
        range_noise (float): Nominal range standard deviation, metres.
    """
    rate: float = 40.0
    fov: float = np.radians(240.0)
    resolution: float = np.radians(0.25)
    range_min: float = 0.1
    range_max: float = 30.0
    range_noise: float = 0.05

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (self.rate > 0 and self.fov > 0 and self.resolution > 0):
            raise InvalidInputError("lidar rate, fov and resolution must be > 0")
        if not (0 <= self.range_min < self.range_max):
            raise InvalidInputError("lidar range window must satisfy 0 <= range_min < range_max")
        if self.range_noise < 0:
            raise InvalidInputError("lidar range noise must be >= 0")

    @property
    def beam_count(self):
        return int(round(self.fov / self.resolution)) + 1

    @property
    def beam_angles(self):
        return np.linspace(-self.fov / 2, self.fov / 2, self.beam_count)


@dataclass
class NoiseModel:
    """
    Zero-mean Gaussian noise injected into poses and ranges.

    Attributes:
        translation_std (float): Pose translation standard deviation, metres.
        rotation_std (float): Pose angle standard deviation, radians.
        range_std (float): Lidar range standard deviation, metres.
        rng_seed (int): Noise seed.
    """
    translation_std: float = 0.05
    rotation_std: float = np.radians(1.0)
    range_std: float = 0.05
    rng_seed: int = 0

    def __post_init__(self):
        if min(self.translation_std, self.rotation_std, self.range_std) < 0:
            raise InvalidInputError("noise standard deviations must be >= 0")

    @classmethod
    def none(cls, rng_seed=0):
        return cls(0.0, 0.0, 0.0, rng_seed)

    @property
    def pose_covariance(self):
        return np.diag([self.translation_std ** 2] * 3 + [self.rotation_std ** 2] * 3)


def check_trajectory(env, poses):
    """
    Raises TrajectoryError unless every pose position lies in the free space of env.
    """
    positions = np.array([[p.x, p.y, p.z] for p in poses]).reshape(-1, 3)
    inside = env.contains(positions)
    if not np.all(inside):
        k = int(np.argmin(inside))
        raise TrajectoryError(
            f"pose {k} at t={poses[k].t:.3f}s, position {positions[k].round(3).tolist()}, "
            f"leaves the free space of {env.name}")


def generate_trajectory(spec, rate, env=None):
    """
    Samples a sinusoidal trajectory.

    Args:
        spec (TrajectorySpec): The motion; randomized first when spec.rng_seed is set.
        rate (float): Sampling rate, Hz.
        env (Environment): When given, every pose is checked to lie in its free space.

    Returns:
        list[Pose]: round(duration * rate) poses at t = k / rate, with zero covariance.

    Raises:
        TrajectoryError: If a pose leaves the free space.
    """
    if not rate > 0:
        raise InvalidInputError(f"rate must be > 0, got {rate!r}")
    if spec.rng_seed is not None:
        spec = spec.randomized()
    times = np.arange(int(round(spec.duration * rate))) / rate
    values = spec.sample(times)
    poses = [Pose.from_vector(t, v) for t, v in zip(times, values)]
    if env is not None:
        check_trajectory(env, poses)
    return poses


def raycast_scan(env, lidar_pose, model, t=0.0):
    """
    Simulates one scan.

    One ray per beam across the field of view in the lidar x-y plane; the
    nearest hit gives the range. Misses and ranges outside the model window
    are marked invalid (and stored as zeros).

    Args:
        env (Environment): The scene.
        lidar_pose (Transform): Lidar-to-global transform.
        model (LidarModel): Beam layout and range window.
        t (float): Scan timestamp.

    Returns:
        Scan: The returns in beam order.
    """
    angles = model.beam_angles
    local = np.stack([np.cos(angles), np.sin(angles), np.zeros_like(angles)], axis=1)
    directions = local @ lidar_pose.rotation.T
    origins = np.broadcast_to(lidar_pose.translation, directions.shape)
    ranges = env.raycast(origins, directions)
    valid = np.isfinite(ranges) & (ranges >= model.range_min) & (ranges <= model.range_max)
    ranges = np.where(valid, ranges, 0.0)
    return Scan(t, local[:, :2] * ranges[:, None], valid)


def apply_noise(poses, scans, noise, lidar=None):
    """
    Adds independent Gaussian noise to every pose component and every range.

    Noisy poses carry Q = diag(st^2, st^2, st^2, sr^2, sr^2, sr^2). Ranges are
    perturbed along their beam; with a lidar model, returns pushed outside
    its range window become invalid.

    Returns:
        tuple: (poses, scans), new lists; deterministic given noise.rng_seed.
    """
    rng = np.random.default_rng(noise.rng_seed)
    Q = noise.pose_covariance
    sigma = np.array([noise.translation_std] * 3 + [noise.rotation_std] * 3)
    vectors = np.array([p.vector for p in poses]).reshape(-1, 6)
    vectors = vectors + rng.standard_normal(vectors.shape) * sigma
    noisy_poses = [Pose.from_vector(p.t, v, Q=Q) for p, v in zip(poses, vectors)]

    noisy_scans = []
    for scan in scans:
        eps = rng.standard_normal(len(scan)) * noise.range_std
        ranges = np.hypot(scan.points[:, 0], scan.points[:, 1])
        noisy_ranges = ranges + eps
        with np.errstate(divide='ignore', invalid='ignore'):
            factor = np.where(scan.valid & (ranges > 0), noisy_ranges / ranges, 1.0)
        valid = scan.valid & (noisy_ranges > 0)
        points = np.where(valid[:, None], scan.points * factor[:, None], 0.0)
        noisy = Scan(scan.t, points, valid)
        if lidar is not None:
            noisy.enforce_range(lidar.range_min, lidar.range_max)
        noisy_scans.append(noisy)
    return noisy_poses, noisy_scans


@dataclass
class Dataset:
    """
    A simulated (or loaded) calibration dataset.

    Attributes:
        scans (list[Scan]): Lidar scans, timestamps shifted by t_d.
        poses (list[Pose]): Reported (scaled, noisy) base-sensor poses.
        lidar (LidarModel): Sensor model.
        truth (CalibParams): Ground-truth calibration, if known.
        t_d (float): Injected lidar delay, seconds, if known.
        environment (str): Scene name.
        metadata (dict): Generation settings.
    """
    scans: list
    poses: list
    lidar: LidarModel = field(default_factory=LidarModel)
    truth: CalibParams = None
    t_d: float = None
    environment: str = None
    metadata: dict = field(default_factory=dict)

    @property
    def n_points(self):
        return int(sum(np.count_nonzero(s.valid) for s in self.scans))


def make_dataset(env, spec, lidar=None, noise=None, true_params=None, t_d=0.0, workers=1):
    """
    Simulates a complete calibration dataset.

    The base sensor follows `spec` in metric units; the lidar is mounted on it
    through calib_to_transform(true_params). Reported poses have their
    translation divided by the true scale, so that lifting with s = true
    scale restores metric geometry. Noise is then added and scan timestamps
    are shifted by t_d.

    Args:
        env (Environment): The scene.
        spec (TrajectorySpec): Base-sensor motion.
        lidar (LidarModel): Sensor model; its rate sets the pose rate.
        noise (NoiseModel): Injected noise; None for noiseless data.
        true_params (CalibParams): Ground truth; defaults to DEFAULT_TRUTH.
        t_d (float): Injected lidar delay, seconds.
        workers (int): Threads raycasting scans.

    Returns:
        Dataset: The bundle.
    """
    lidar = lidar or LidarModel()
    noise = noise or NoiseModel.none()
    truth = true_params or DEFAULT_TRUTH
    if not np.isfinite(t_d):
        raise InvalidInputError("t_d must be finite")
    metric_poses = generate_trajectory(spec, lidar.rate, env)
    T_cl = calib_to_transform(truth)

    def scan_at(pose):
        return raycast_scan(env, pose_to_transform(pose, 1.0) @ T_cl, lidar, t=pose.t)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scans = list(pool.map(scan_at, metric_poses))
    else:
        scans = [scan_at(p) for p in metric_poses]

    reported = [Pose.from_vector(p.t, np.concatenate([p.vector[:3] / truth.s, p.vector[3:]])) for p in metric_poses]
    poses, scans = apply_noise(reported, scans, noise, lidar)
    if t_d:
        scans = [Scan(s.t + t_d, s.points, s.valid) for s in scans]

    dataset = Dataset(
        scans=scans,
        poses=poses,
        lidar=lidar,
        truth=truth,
        t_d=float(t_d),
        environment=env.name,
        metadata={'duration': spec.duration, 'noise': vars(noise).copy()},
    )
    logger.info("simulated %s: %d scans, %d valid returns", env.name, len(scans), dataset.n_points)
    return dataset
