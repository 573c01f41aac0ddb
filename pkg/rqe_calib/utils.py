import hashlib
import logging
import math

import numpy as np

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


def setup_logging(level=logging.INFO):
    """
    Configures the root logger for command-line use.

    Library modules only create their own loggers; this is called once by the CLI.

    Args:
        level (int): Logging level.
    """
    logging.basicConfig(level=level, format=LOG_FORMAT)
    logging.getLogger().setLevel(level)


def wrap_angle(angle):
    """
    Wraps angles to the interval (-pi, pi].

    Args:
        angle (float or np.ndarray): Angle(s) in radians.

    Returns:
        Same type as input, wrapped. Angles already in range are returned
        bit for bit.
    """
    angle_arr = np.asarray(angle, dtype=float)
    wrapped = np.mod(angle_arr + np.pi, 2.0 * np.pi) - np.pi
    # mod maps +pi to -pi; the interval is open at -pi
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)
    wrapped = np.where((angle_arr > -np.pi) & (angle_arr <= np.pi), angle_arr, wrapped)
    if np.ndim(angle) == 0:
        return float(wrapped)
    return wrapped


def symmetrize(matrices):
    """
    Returns (A + A^T) / 2 for one matrix or a stack of matrices.
    """
    matrices = np.asarray(matrices, dtype=float)
    return 0.5 * (matrices + np.swapaxes(matrices, -1, -2))


def clamp_psd(matrices):
    """
    Symmetrizes and clamps negative eigenvalues to zero.

    Works on a single square matrix or on a stack of them (..., n, n).

    Args:
        matrices (np.ndarray): Matrix or stack of matrices.

    Returns:
        np.ndarray: The nearest symmetric PSD matrices in the eigenvalue sense.
    """
    sym = symmetrize(matrices)
    eigvals, eigvecs = np.linalg.eigh(sym)
    if np.all(eigvals >= 0.0):
        return sym
    negative = np.any(eigvals < 0.0, axis=-1)
    eigvals = np.clip(eigvals, 0.0, None)
    clamped = symmetrize(np.einsum('...ij,...j,...kj->...ik', eigvecs, eigvals, eigvecs))
    return np.where(negative[..., None, None], clamped, sym)


def compensated_sum(values):
    """
    Order-independent exactly rounded sum of an iterable of floats.

    Args:
        values (Iterable[float]): Partial sums.

    Returns:
        float: The correctly rounded total.
    """
    return math.fsum(float(v) for v in values)


def file_digest(path, chunk_size=1 << 20):
    """
    SHA-256 hex digest of a file's bytes.
    """
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(chunk_size), b''):
            digest.update(chunk)
    return digest.hexdigest()


def array_digest(*arrays):
    """
    SHA-256 hex digest of the raw bytes of some numpy arrays.
    """
    digest = hashlib.sha256()
    for array in arrays:
        array = np.ascontiguousarray(array)
        digest.update(str(array.dtype).encode())
        digest.update(str(array.shape).encode())
        digest.update(array.tobytes())
    return digest.hexdigest()
