"""
File formats.

All formats are UTF-8 text. Numbers are written with 17 significant digits,
so a value read back is bitwise the value written.

- pose file: one pose per line, "t x y z phi theta psi" optionally followed
  by the 36 row-major entries of Q; angles in radians; '#' comments.
- scan file: one return per line, "t beam_index x y valid"; consecutive
  lines with the same t form a scan, in beam order.
- params file: 'key = value' lines x, y, z (metres), phi_deg, theta_deg,
  psi_deg (degrees), s and optionally td_ms (milliseconds).
- result: the params file keys plus a run summary (.txt) and the full
  CalibResult (.json).
- dataset directory: scans.txt, poses.txt, manifest.json and, when known,
  truth.txt.
"""

import json
import logging
import math
import os

import numpy as np
import pandas as pd

from .attrdict import AttrDict
from .entropy import GmmCloud
from .errors import CalibrationError, EmptyCloudError, FileFormatError, OrderingError
from .geometry import CalibParams, Pose, Scan
from .results import CalibResult, params_to_lines
from .simulator import Dataset, LidarModel
from .utils import file_digest

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)
FLOAT_FORMAT = '%.17g'

MANIFEST_NAME = 'manifest.json'
SCAN_NAME = 'scans.txt'
POSE_NAME = 'poses.txt'
TRUTH_NAME = 'truth.txt'

POSE_HEADER = "# t x y z phi theta psi [Q00 Q01 ... Q55]\n"
SCAN_HEADER = "# t beam_index x y valid\n"
SCAN_COLUMNS = ['t', 'beam', 'x', 'y', 'valid']

PARAM_KEYS = ('x', 'y', 'z', 'phi_deg', 'theta_deg', 'psi_deg', 's')


def _fmt(value):
    return FLOAT_FORMAT % value


def _data_lines(path):
    """
    Yields (line number, fields) for every non-blank, non-comment line.
    """
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if line and not line.startswith('#'):
                yield lineno, line.split()


def _parse_floats(fields, path, lineno):
    try:
        return [float(v) for v in fields]
    except ValueError as e:
        raise FileFormatError(f"malformed number: {e}", path, lineno)


# ---- poses ----

def write_poses(path, poses):
    """
    Writes a pose file; Q is written only when some pose carries a non-zero one.
    """
    with_q = any(np.any(p.Q) for p in poses)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(POSE_HEADER)
        for p in poses:
            values = [p.t, *p.vector]
            if with_q:
                values.extend(p.Q.ravel())
            f.write(" ".join(_fmt(v) for v in values) + "\n")


def read_poses(path):
    """
    Reads a pose file.

    Returns:
        list[Pose]: The poses, Q = 0 where omitted.

    Raises:
        FileFormatError: On a malformed line, naming its number.
        OrderingError: At the first timestamp not above its predecessor.
    """
    poses = []
    for lineno, fields in _data_lines(path):
        if len(fields) not in (7, 43):
            raise FileFormatError(f"expected 7 or 43 fields, got {len(fields)}", path, lineno)
        values = _parse_floats(fields, path, lineno)
        if poses and values[0] <= poses[-1].t:
            raise OrderingError(f"timestamp {values[0]!r} does not follow {poses[-1].t!r}", path, lineno)
        Q = np.array(values[7:]).reshape(6, 6) if len(values) == 43 else None
        try:
            poses.append(Pose.from_vector(values[0], values[1:7], Q=Q))
        except CalibrationError as e:
            raise FileFormatError(str(e), path, lineno)
    return poses


# ---- scans ----

def write_scans(path, scans):
    """
    Writes a scan file, one line per return including invalid ones.
    """
    frames = [
        pd.DataFrame({
            't': np.full(len(s), s.t),
            'beam': np.arange(len(s)),
            'x': s.points[:, 0],
            'y': s.points[:, 1],
            'valid': s.valid.astype(int),
        })
        for s in scans
    ]
    frame = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=SCAN_COLUMNS)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        f.write(SCAN_HEADER)
        frame.to_csv(f, sep=' ', header=False, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')


def _scan_records_slow(path):
    """
    Line-by-line parse, used to locate the error when the bulk parse fails.
    """
    rows = []
    for lineno, fields in _data_lines(path):
        if len(fields) != 5:
            raise FileFormatError(f"expected 5 fields, got {len(fields)}", path, lineno)
        t, beam, x, y, valid = _parse_floats(fields, path, lineno)
        if not (math.isfinite(t) and math.isfinite(beam)) or beam != int(beam) or valid not in (0.0, 1.0):
            raise FileFormatError("t must be finite, beam_index an integer and valid 0 or 1", path, lineno)
        rows.append((t, beam, x, y, valid))
    return pd.DataFrame(rows, columns=SCAN_COLUMNS, dtype=float)


def _well_formed(frame):
    # x and y of invalid returns may be nan
    keys = frame[['t', 'beam', 'valid']].to_numpy()
    return (np.all(np.isfinite(keys))
            and frame['valid'].isin([0.0, 1.0]).all()
            and (frame['beam'] == frame['beam'].round()).all())


def _scan_line_numbers(path):
    return [lineno for lineno, _ in _data_lines(path)]


def read_scans(path):
    """
    Reads a scan file.

    Returns:
        list[Scan]: One scan per group of consecutive returns sharing t; empty
        (with a warning) for a file without records.

    Raises:
        FileFormatError: On a malformed line, naming its number.
        OrderingError: When a scan's timestamp decreases or reappears, or beam
            indices are not increasing within a scan.
    """
    try:
        frame = pd.read_csv(path, sep=r'\s+', comment='#', header=None, names=SCAN_COLUMNS, index_col=False,
                            dtype=float, float_precision='round_trip', engine='c')
    except pd.errors.EmptyDataError:
        frame = pd.DataFrame(columns=SCAN_COLUMNS, dtype=float)
    except (ValueError, pd.errors.ParserError):
        frame = None
    if frame is None or not _well_formed(frame):
        frame = _scan_records_slow(path)

    if frame.empty:
        logger.warning("scan file %s holds no records", path)
        return []

    t = frame['t'].to_numpy()
    beam = frame['beam'].to_numpy()
    starts = np.flatnonzero(np.r_[True, t[1:] != t[:-1]])
    bad_time = np.flatnonzero(np.diff(t[starts]) <= 0)
    ends = np.r_[starts[1:], len(t)]
    same_scan = np.r_[False, t[1:] == t[:-1]]
    bad_beam = np.flatnonzero(same_scan & (np.r_[np.inf, np.diff(beam)] <= 0))
    if len(bad_time) or len(bad_beam):
        lines = _scan_line_numbers(path)
        if len(bad_time):
            row = starts[bad_time[0] + 1]
            raise OrderingError(f"scan timestamp {t[row]!r} does not follow {t[row - 1]!r}", path, lines[row])
        row = bad_beam[0]
        raise OrderingError(f"beam index {int(beam[row])} does not follow {int(beam[row - 1])}", path, lines[row])

    xy = frame[['x', 'y']].to_numpy()
    valid = frame['valid'].to_numpy() == 1.0
    try:
        return [Scan(t[a], xy[a:b], valid[a:b]) for a, b in zip(starts, ends)]
    except CalibrationError as e:
        raise FileFormatError(str(e), path)


# ---- params and results ----

def params_from_items(items, source="<string>", allow_extra=False):
    """
    Converts parsed 'key = value' items to (CalibParams, t_d or None).
    """
    known = PARAM_KEYS + ('td_ms',)
    if not allow_extra:
        try:
            items.check_known(known, source)
        except CalibrationError as e:
            raise FileFormatError(str(e))
    missing = [key for key in PARAM_KEYS if key not in items]
    if missing:
        raise FileFormatError(f"missing keys: {', '.join(missing)}", source)
    try:
        values = {key: float(items[key]) for key in known if key in items}
    except ValueError as e:
        raise FileFormatError(f"malformed number: {e}", source)
    try:
        params = CalibParams(
            values['x'], values['y'], values['z'],
            math.radians(values['phi_deg']), math.radians(values['theta_deg']), math.radians(values['psi_deg']),
            values['s'])
    except CalibrationError as e:
        raise FileFormatError(str(e), source)
    t_d = values['td_ms'] * 1e-3 if 'td_ms' in values else None
    return params, t_d


def read_params(path, allow_extra=False):
    """
    Reads a params file.

    Args:
        path (str): The file.
        allow_extra (bool): Ignore keys other than the parameters (result files).

    Returns:
        tuple: (CalibParams, t_d in seconds or None).
    """
    with open(path, 'r', encoding='utf-8') as f:
        text = f.read()
    try:
        items = AttrDict.from_key_values(text, str(path))
    except CalibrationError as e:
        raise FileFormatError(str(e))
    return params_from_items(items, str(path), allow_extra)


def write_params(path, params, t_d=None):
    with open(path, 'w', encoding='utf-8') as f:
        f.write("\n".join(params_to_lines(params, t_d)) + "\n")


def result_paths(out):
    """
    The (.txt, .json) pair a result is written to; a given suffix is dropped.
    """
    stem, ext = os.path.splitext(str(out))
    if ext not in ('.txt', '.json'):
        stem = str(out)
    return stem + '.txt', stem + '.json'


def write_result(out, result):
    """
    Writes a CalibResult as key-value text and as JSON.

    Returns:
        tuple: The two paths written.
    """
    txt_path, json_path = result_paths(out)
    with open(txt_path, 'w', encoding='utf-8') as f:
        f.write(result.to_key_values())
    with open(json_path, 'w', encoding='utf-8') as f:
        f.write(result.to_json())
    logger.info("result written to %s and %s", txt_path, json_path)
    return txt_path, json_path


def read_result(path):
    """
    Reads the calibration of a result file, JSON or key-value text.

    Returns:
        tuple: (CalibParams, t_d in seconds or None).
    """
    if str(path).endswith('.json'):
        with open(path, 'r', encoding='utf-8') as f:
            try:
                result = CalibResult.from_json(f.read())
            except (ValueError, KeyError, TypeError) as e:
                raise FileFormatError(f"not a calibration result: {e}", path)
        return result.params, result.t_d
    return read_params(path, allow_extra=True)


# ---- clouds and plot data ----

def export_ply(cloud, path):
    """
    Writes the cloud centroids as an ASCII PLY file.

    Raises:
        EmptyCloudError: For a cloud without points.
    """
    if len(cloud) == 0:
        raise EmptyCloudError("cannot export an empty cloud")
    with open(path, 'w', encoding='utf-8') as f:
        f.write('ply\n')
        f.write('format ascii 1.0\n')
        f.write('element vertex {:d}\n'.format(len(cloud)))
        f.write('property double x\n')
        f.write('property double y\n')
        f.write('property double z\n')
        f.write('end_header\n')
        np.savetxt(f, cloud.positions, fmt=FLOAT_FORMAT)
    logger.info("%d points exported to %s", len(cloud), path)


def read_ply(path):
    """
    Reads the vertices of an ASCII PLY file written by export_ply.
    """
    with open(path, 'r', encoding='utf-8') as f:
        if f.readline().strip() != 'ply':
            raise FileFormatError("missing 'ply' magic line", path, 1)
        count, lineno = None, 1
        for line in f:
            lineno += 1
            line = line.strip()
            if line.startswith('element vertex'):
                count = int(line.split()[2])
            if line == 'end_header':
                break
        else:
            raise FileFormatError("missing end_header", path, lineno)
        if count is None:
            raise FileFormatError("no vertex element declared", path)
        positions = np.loadtxt(f, ndmin=2, max_rows=count)
    if len(positions) != count:
        raise FileFormatError(f"header declares {count} vertices, found {len(positions)}", path)
    return GmmCloud(positions)


def write_csv(path, frame):
    """
    Writes plot data: header row, comma-separated, '.' decimal.
    """
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')


# ---- datasets ----

def save_dataset(dataset, directory):
    """
    Writes a dataset directory.

    Returns:
        dict: The manifest written.
    """
    os.makedirs(directory, exist_ok=True)
    scan_path = os.path.join(directory, SCAN_NAME)
    pose_path = os.path.join(directory, POSE_NAME)
    write_scans(scan_path, dataset.scans)
    write_poses(pose_path, dataset.poses)
    manifest = {
        'format_version': FORMAT_VERSION,
        'scans': SCAN_NAME,
        'poses': POSE_NAME,
        'lidar': vars(dataset.lidar).copy(),
        'units': {'length': 'm', 'angle': 'rad', 'time': 's'},
        'environment': dataset.environment,
        'truth': None,
        't_d': dataset.t_d,
        'metadata': dataset.metadata,
        'digests': {'scans': file_digest(scan_path), 'poses': file_digest(pose_path)},
    }
    if dataset.truth is not None:
        manifest['truth'] = {name: getattr(dataset.truth, name) for name in ('x', 'y', 'z', 'phi', 'theta', 'psi', 's')}
        write_params(os.path.join(directory, TRUTH_NAME), dataset.truth, dataset.t_d)
    with open(os.path.join(directory, MANIFEST_NAME), 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2)
    logger.info("dataset written to %s: %d scans, %d poses", directory, len(dataset.scans), len(dataset.poses))
    return manifest


def read_manifest(directory):
    path = os.path.join(directory, MANIFEST_NAME)
    with open(path, 'r', encoding='utf-8') as f:
        try:
            manifest = json.load(f)
        except ValueError as e:
            raise FileFormatError(f"invalid JSON: {e}", path)
    version = manifest.get('format_version')
    if version not in SUPPORTED_VERSIONS:
        raise FileFormatError(f"unsupported format_version {version!r}", path)
    for key in ('scans', 'poses'):
        if key not in manifest:
            raise FileFormatError(f"missing '{key}' entry", path)
    return manifest


def load_dataset(directory):
    """
    Reads a dataset directory written by save_dataset (or by hand, with a manifest).

    Valid returns outside the manifest lidar's range window are marked invalid.

    Raises:
        FileFormatError: On an unsupported manifest or unparsable data files.
        OSError: When a referenced file is missing.
    """
    manifest = read_manifest(directory)
    scan_path = os.path.join(directory, manifest['scans'])
    pose_path = os.path.join(directory, manifest['poses'])
    for name, path in (('scans', scan_path), ('poses', pose_path)):
        expected = manifest.get('digests', {}).get(name)
        if expected and file_digest(path) != expected:
            logger.warning("%s differs from the digest recorded in the manifest", path)
    try:
        lidar = LidarModel(**manifest['lidar']) if manifest.get('lidar') else LidarModel()
        truth = CalibParams(**manifest['truth']) if manifest.get('truth') else None
    except (TypeError, CalibrationError) as e:
        raise FileFormatError(f"invalid manifest entry: {e}", os.path.join(directory, MANIFEST_NAME))
    scans = read_scans(scan_path)
    before = sum(int(np.count_nonzero(scan.valid)) for scan in scans)
    for scan in scans:
        scan.enforce_range(lidar.range_min, lidar.range_max)
    dropped = before - sum(int(np.count_nonzero(scan.valid)) for scan in scans)
    if dropped:
        logger.warning("%s: %d valid returns outside the lidar range [%g, %g] m marked invalid",
                       scan_path, dropped, lidar.range_min, lidar.range_max)
    return Dataset(
        scans=scans,
        poses=read_poses(pose_path),
        lidar=lidar,
        truth=truth,
        t_d=manifest.get('t_d'),
        environment=manifest.get('environment'),
        metadata=manifest.get('metadata', {}),
    )
