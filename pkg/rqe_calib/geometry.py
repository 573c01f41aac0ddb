"""
Geometry Module

Rigid-body and similarity transforms, the Euler-angle convention, the inverse
sensor model lifting 2D lidar returns into the global frame, and the Jacobian
based propagation of pose covariance onto the lifted points.

Conventions:
- Euler angles are roll (phi), pitch (theta), yaw (psi), composed intrinsically
  as R = Rz(psi) @ Ry(theta) @ Rx(phi). Imported pose files must use the same
  convention.
- The scale s of a Sim(3) calibration multiplies the translation of the
  camera-to-global transform only. Rotations are scale free and s never
  enters the camera-to-lidar matrix.
- Pose covariances Q are expressed in the global frame, over the six pose
  parameters (x, y, z, phi, theta, psi) in that order.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InvalidInputError
from .utils import clamp_psd, wrap_angle

logger = logging.getLogger(__name__)

EULER_SEQUENCE = 'ZYX'
PARAM_NAMES = ('x', 'y', 'z', 'phi', 'theta', 'psi', 's')
ANGLE_PARAMS = ('phi', 'theta', 'psi')
GIMBAL_TOLERANCE = 1e-6
FD_STEP = 1e-6
# points lifted per block in the batch routines
CHUNK_SIZE = 1 << 18


def _require_finite(name, value):
    value = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(value)):
        raise InvalidInputError(f"{name} must be finite, got {value!r}")
    return value


def euler_to_rotation(phi, theta, psi):
    """
    Rotation matrices R = Rz(psi) Ry(theta) Rx(phi).

    Args:
        phi, theta, psi (float or np.ndarray): Roll, pitch and yaw in radians,
            broadcastable against each other.

    Returns:
        np.ndarray: (3, 3) for scalar input, (..., 3, 3) otherwise.
    """
    phi, theta, psi = np.broadcast_arrays(
        np.asarray(phi, dtype=float), np.asarray(theta, dtype=float), np.asarray(psi, dtype=float))
    shape = phi.shape
    angles = np.stack([psi.ravel(), theta.ravel(), phi.ravel()], axis=-1)
    matrices = Rotation.from_euler(EULER_SEQUENCE, angles).as_matrix()
    return matrices.reshape(shape + (3, 3))


def rotation_to_euler(R):
    """
    Inverse of euler_to_rotation.

    When |theta| is within GIMBAL_TOLERANCE of pi/2, roll and yaw are not
    separable; phi is then set to 0 and the whole in-plane rotation goes to psi.

    Args:
        R (np.ndarray): A (3, 3) rotation matrix.

    Returns:
        tuple: (phi, theta, psi) in radians.
    """
    R = np.asarray(R, dtype=float)
    theta = float(np.arcsin(np.clip(-R[2, 0], -1.0, 1.0)))
    if abs(abs(theta) - np.pi / 2) < GIMBAL_TOLERANCE:
        phi = 0.0
        psi = float(np.arctan2(-R[0, 1], R[1, 1]))
    else:
        phi = float(np.arctan2(R[2, 1], R[2, 2]))
        psi = float(np.arctan2(R[1, 0], R[0, 0]))
    return wrap_angle(phi), theta, wrap_angle(psi)


@dataclass(frozen=True)
class CalibParams:
    """
    The Sim(3) calibration vector Xi = [x, y, z, phi, theta, psi, s].

    Translation in metres, angles in radians (normalized to (-pi, pi] on
    construction), s a positive dimensionless scale.
    """
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    phi: float = 0.0
    theta: float = 0.0
    psi: float = 0.0
    s: float = 1.0

    def __post_init__(self):
        for name in PARAM_NAMES:
            value = getattr(self, name)
            if not np.isfinite(value):
                raise InvalidInputError(f"calibration parameter {name} must be finite, got {value!r}")
            object.__setattr__(self, name, float(value))
        if self.s <= 0.0:
            raise InvalidInputError(f"scale s must be > 0, got {self.s!r}")
        for name in ANGLE_PARAMS:
            object.__setattr__(self, name, wrap_angle(getattr(self, name)))

    def as_vector(self):
        return np.array([getattr(self, name) for name in PARAM_NAMES])

    @classmethod
    def from_vector(cls, vector):
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (7,):
            raise InvalidInputError(f"expected a 7-vector, got shape {vector.shape}")
        return cls(*vector.tolist())

    def to_search_vector(self):
        """
        The optimizer's search coordinates: scale replaced by log(s).
        """
        vector = self.as_vector()
        vector[6] = np.log(self.s)
        return vector

    @classmethod
    def from_search_vector(cls, vector):
        vector = np.array(vector, dtype=float)
        if vector.shape != (7,):
            raise InvalidInputError(f"expected a 7-vector, got shape {vector.shape}")
        vector[6] = np.exp(vector[6])
        return cls(*vector.tolist())

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass
class Pose:
    """
    A timestamped 6-DOF egomotion sample.

    Attributes:
        t (float): Timestamp in seconds.
        x, y, z (float): Position in metres.
        phi, theta, psi (float): Roll, pitch, yaw in radians.
        Q (np.ndarray): 6x6 covariance over (x, y, z, phi, theta, psi).
            Defaults to zeros. Asymmetry above 1e-12 or eigenvalues below
            -1e-12 are rejected; smaller negative eigenvalues are clamped.
    """
    t: float
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    phi: float = 0.0
    theta: float = 0.0
    psi: float = 0.0
    Q: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        _require_finite("pose", [self.t, self.x, self.y, self.z, self.phi, self.theta, self.psi])
        self.t = float(self.t)
        if self.Q is None:
            self.Q = np.zeros((6, 6))
        else:
            self.Q = validate_covariance(self.Q, size=6, name="pose covariance")

    @property
    def vector(self):
        return np.array([self.x, self.y, self.z, self.phi, self.theta, self.psi])

    @classmethod
    def from_vector(cls, t, vector, Q=None):
        vector = np.asarray(vector, dtype=float)
        return cls(t, *vector.tolist(), Q=Q)


@dataclass
class Scan:
    """
    A timestamped 2D lidar scan.

    Attributes:
        t (float): Timestamp in seconds.
        points (np.ndarray): (N, 2) returns in the lidar x-y plane, metres, in beam order.
        valid (np.ndarray): (N,) bool mask; False for misses and out-of-range returns.
    """
    t: float
    points: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        self.t = float(_require_finite("scan timestamp", self.t))
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if self.valid is None:
            self.valid = np.isfinite(self.points).all(axis=1)
        else:
            self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)
            if len(self.valid) != len(self.points):
                raise InvalidInputError("scan validity mask and points differ in length")
        if not np.all(np.isfinite(self.points[self.valid])):
            raise InvalidInputError(f"scan at t={self.t} has non-finite valid points")

    def __len__(self):
        return len(self.points)

    @property
    def valid_points(self):
        return self.points[self.valid]

    def enforce_range(self, range_min, range_max):
        """
        Invalidates returns whose range falls outside [range_min, range_max].
        """
        ranges = np.hypot(self.points[:, 0], self.points[:, 1])
        with np.errstate(invalid='ignore'):
            self.valid = self.valid & (ranges >= range_min) & (ranges <= range_max)
        return self


def validate_covariance(Q, size, name="covariance", tol=1e-12):
    """
    Checks a covariance matrix and returns it symmetrized and clamped.

    Args:
        Q (array-like): The matrix.
        size (int): Expected dimension.
        name (str): Used in error messages.
        tol (float): Absolute tolerance on asymmetry and negative eigenvalues.

    Returns:
        np.ndarray: The (size, size) PSD matrix.

    Raises:
        InvalidInputError: On shape, finiteness, asymmetry or negativity violations.
    """
    Q = np.array(Q, dtype=float)
    if Q.shape != (size, size):
        raise InvalidInputError(f"{name} must be {size}x{size}, got shape {Q.shape}")
    _require_finite(name, Q)
    if np.max(np.abs(Q - Q.T)) > tol:
        raise InvalidInputError(f"{name} is not symmetric (max asymmetry {np.max(np.abs(Q - Q.T)):.3g})")
    if not np.any(Q):
        return Q
    min_eig = np.linalg.eigvalsh(0.5 * (Q + Q.T))[0]
    if min_eig < -tol:
        raise InvalidInputError(f"{name} is not positive semi-definite (min eigenvalue {min_eig:.3g})")
    return clamp_psd(Q)


class Transform:
    """
    A 4x4 homogeneous rigid transform.

    The rotation block is checked to be orthonormal with determinant +1 to
    within 1e-9 and the bottom row to be (0, 0, 0, 1).

    Attributes:
        matrix (np.ndarray): The 4x4 matrix.

    Methods:
        from_rt(R, t): Builds a transform from a rotation and a translation.
        identity(): The identity transform.
        inverse(): The inverse transform.
        apply(points): Maps (N, 3) points.
    """
    def __init__(self, matrix, tol=1e-9):
        matrix = _require_finite("transform", matrix)
        if matrix.shape != (4, 4):
            raise InvalidInputError(f"transform must be 4x4, got shape {matrix.shape}")
        R = matrix[:3, :3]
        if np.max(np.abs(R.T @ R - np.eye(3))) > tol or abs(np.linalg.det(R) - 1.0) > tol:
            raise InvalidInputError("transform rotation block is not a proper rotation")
        if np.max(np.abs(matrix[3] - [0.0, 0.0, 0.0, 1.0])) > 0.0:
            raise InvalidInputError("transform bottom row must be (0, 0, 0, 1)")
        self.matrix = matrix

    @classmethod
    def from_rt(cls, R, t):
        matrix = np.eye(4)
        matrix[:3, :3] = R
        matrix[:3, 3] = t
        return cls(matrix)

    @classmethod
    def identity(cls):
        return cls(np.eye(4))

    @property
    def rotation(self):
        return self.matrix[:3, :3]

    @property
    def translation(self):
        return self.matrix[:3, 3]

    def __matmul__(self, other):
        if isinstance(other, Transform):
            return Transform(self.matrix @ other.matrix)
        return NotImplemented

    def inverse(self):
        R = self.rotation
        return Transform.from_rt(R.T, -R.T @ self.translation)

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def __repr__(self):
        return f"Transform({self.matrix!r})"


@dataclass
class WorldPoint:
    """
    A lifted lidar return: one component of the Gaussian mixture.

    Attributes:
        position (np.ndarray): 3-vector in the global frame, metres.
        sigma (np.ndarray): 3x3 covariance, m^2.
        t (float): Timestamp of the originating scan.
        k (int): Scan (pose) index, if known.
        n (int): Beam index within the scan, if known.
    """
    position: np.ndarray
    sigma: np.ndarray
    t: float = 0.0
    k: int = None
    n: int = None


def pose_to_transform(pose, scale=1.0):
    """
    The camera-to-global transform T_{G,C}(s) of a pose.

    Args:
        pose (Pose): The egomotion sample.
        scale (float): Trajectory scale s > 0, applied to the translation only.

    Returns:
        Transform: Rotation from the pose's Euler angles, translation s * (x, y, z).
    """
    scale = float(_require_finite("scale", scale))
    if scale <= 0.0:
        raise InvalidInputError(f"scale must be > 0, got {scale!r}")
    R = euler_to_rotation(pose.phi, pose.theta, pose.psi)
    return Transform.from_rt(R, scale * np.array([pose.x, pose.y, pose.z]))


def calib_to_transform(params):
    """
    The lidar-to-camera transform T_{C,L} of a calibration vector.

    The scale s is not part of this matrix.
    """
    R = euler_to_rotation(params.phi, params.theta, params.psi)
    return Transform.from_rt(R, [params.x, params.y, params.z])


def transform_to_calib(transform, s=1.0):
    """
    Recovers calibration parameters from a lidar-to-camera transform.

    Args:
        transform (Transform): T_{C,L}.
        s (float): The scale to attach to the result.

    Returns:
        CalibParams: The parameters; see rotation_to_euler for the gimbal-lock rule.
    """
    phi, theta, psi = rotation_to_euler(transform.rotation)
    x, y, z = transform.translation
    return CalibParams(x, y, z, phi, theta, psi, s)


def _lidar_to_camera(xy, params):
    """Points of the lidar plane expressed in the camera frame, (N, 3)."""
    R_cl = euler_to_rotation(params.phi, params.theta, params.psi)
    t_cl = np.array([params.x, params.y, params.z])
    return xy[:, :1] * R_cl[:, 0] + xy[:, 1:2] * R_cl[:, 1] + t_cl


def _pose_arrays(pose_vectors):
    pose_vectors = _require_finite("pose vectors", pose_vectors)
    if pose_vectors.ndim != 2 or pose_vectors.shape[1] != 6:
        raise InvalidInputError(f"pose vectors must be (K, 6), got shape {pose_vectors.shape}")
    rotations = euler_to_rotation(pose_vectors[:, 3], pose_vectors[:, 4], pose_vectors[:, 5])
    return pose_vectors, rotations


def _check_points(xy, pose_index, n_poses):
    xy = _require_finite("scan points", xy)
    if xy.ndim != 2 or xy.shape[1] != 2:
        raise InvalidInputError(f"scan points must be (N, 2), got shape {xy.shape}")
    if pose_index is None:
        if len(xy) != n_poses:
            raise InvalidInputError("without pose_index, points and poses must be index-aligned")
        pose_index = np.arange(len(xy))
    pose_index = np.asarray(pose_index, dtype=np.intp)
    return xy, pose_index


def lift_points(xy, pose_vectors, params, pose_index=None):
    """
    Batch inverse sensor model.

    Computes x_G = T_{G,C_k}(s) T_{C,L} [x, y, 0, 1]^T for every point.

    Args:
        xy (np.ndarray): (N, 2) lidar-plane points.
        pose_vectors (np.ndarray): (K, 6) poses (x, y, z, phi, theta, psi).
        params (CalibParams): Calibration, including the scale.
        pose_index (np.ndarray): (N,) pose index of each point. Defaults to
            one pose per point.

    Returns:
        np.ndarray: (N, 3) global positions.
    """
    pose_vectors, rotations = _pose_arrays(pose_vectors)
    xy, pose_index = _check_points(xy, pose_index, len(pose_vectors))
    p_cam = _lidar_to_camera(xy, params)
    translations = params.s * pose_vectors[:, :3]
    out = np.empty((len(xy), 3))
    for start in range(0, len(xy), CHUNK_SIZE):
        block = slice(start, start + CHUNK_SIZE)
        idx = pose_index[block]
        out[block] = np.einsum('nij,nj->ni', rotations[idx], p_cam[block]) + translations[idx]
    return out


def _rotation_derivatives(pose_vectors):
    """
    Central-difference derivatives of each pose rotation w.r.t. its three angles.

    Step h = max(FD_STEP, FD_STEP * |angle|) per component.

    Returns:
        np.ndarray: (3, K, 3, 3), one stack per angle.
    """
    derivatives = np.empty((3, len(pose_vectors), 3, 3))
    for a in range(3):
        column = 3 + a
        h = np.maximum(FD_STEP, FD_STEP * np.abs(pose_vectors[:, column]))
        plus = pose_vectors[:, 3:].copy()
        minus = pose_vectors[:, 3:].copy()
        plus[:, a] += h
        minus[:, a] -= h
        R_plus = euler_to_rotation(plus[:, 0], plus[:, 1], plus[:, 2])
        R_minus = euler_to_rotation(minus[:, 0], minus[:, 1], minus[:, 2])
        derivatives[a] = (R_plus - R_minus) / (2.0 * h)[:, None, None]
    return derivatives


def point_jacobians(xy, pose_vectors, params, pose_index=None):
    """
    3x6 Jacobians of the inverse sensor model w.r.t. the pose parameters.

    The translation block is exactly s * I (the model is affine in the pose
    translation); the rotation block uses central differences of the pose
    rotation matrix, which equals central differences of the lifted point
    since the model is linear in that matrix.

    Returns:
        np.ndarray: (N, 3, 6).
    """
    pose_vectors, _ = _pose_arrays(pose_vectors)
    xy, pose_index = _check_points(xy, pose_index, len(pose_vectors))
    p_cam = _lidar_to_camera(xy, params)
    derivatives = _rotation_derivatives(pose_vectors)
    J = np.zeros((len(xy), 3, 6))
    J[:, 0, 0] = J[:, 1, 1] = J[:, 2, 2] = params.s
    for a in range(3):
        J[:, :, 3 + a] = np.einsum('nij,nj->ni', derivatives[a][pose_index], p_cam)
    return J


def propagate_covariances(xy, pose_vectors, pose_covariances, params, pose_index=None):
    """
    Batch covariance propagation Sigma = J Q J^T.

    Args:
        xy (np.ndarray): (N, 2) lidar-plane points.
        pose_vectors (np.ndarray): (K, 6) poses.
        pose_covariances (np.ndarray): (K, 6, 6) pose covariances.
        params (CalibParams): Calibration.
        pose_index (np.ndarray): (N,) pose index of each point.

    Returns:
        np.ndarray: (N, 3, 3) symmetrized PSD covariances.
    """
    pose_vectors, _ = _pose_arrays(pose_vectors)
    xy, pose_index = _check_points(xy, pose_index, len(pose_vectors))
    pose_covariances = np.asarray(pose_covariances, dtype=float)
    sigmas = np.zeros((len(xy), 3, 3))
    if not np.any(pose_covariances):
        return sigmas
    p_cam = _lidar_to_camera(xy, params)
    derivatives = _rotation_derivatives(pose_vectors)
    for start in range(0, len(xy), CHUNK_SIZE):
        block = slice(start, start + CHUNK_SIZE)
        idx = pose_index[block]
        J = np.zeros((len(idx), 3, 6))
        J[:, 0, 0] = J[:, 1, 1] = J[:, 2, 2] = params.s
        for a in range(3):
            J[:, :, 3 + a] = np.einsum('nij,nj->ni', derivatives[a][idx], p_cam[block])
        sigma = np.einsum('nij,njk,nlk->nil', J, pose_covariances[idx], J)
        sigmas[block] = clamp_psd(sigma)
    return sigmas


def lift_point(scan_point, pose, params, k=None, n=None):
    """
    Lifts one lidar return into the global frame.

    Args:
        scan_point (array-like): (x, y) in the lidar plane, metres.
        pose (Pose): The base-sensor pose at the scan time.
        params (CalibParams): Candidate calibration.
        k (int): Optional scan index to record.
        n (int): Optional beam index to record.

    Returns:
        WorldPoint: Position and propagated covariance.
    """
    xy = np.asarray(scan_point, dtype=float).reshape(1, 2)
    vectors = pose.vector[None, :]
    position = lift_points(xy, vectors, params)[0]
    sigma = propagate_covariances(xy, vectors, pose.Q[None], params)[0]
    return WorldPoint(position=position, sigma=sigma, t=pose.t, k=k, n=n)


def propagate_covariance(scan_point, pose, params):
    """
    Covariance of a lifted point, Sigma = J Q J^T (3x3, m^2).
    """
    xy = np.asarray(scan_point, dtype=float).reshape(1, 2)
    return propagate_covariances(xy, pose.vector[None, :], pose.Q[None], params)[0]
