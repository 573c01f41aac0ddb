import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import PARAM_NAMES, CalibParams
from .utils import array_digest, wrap_angle

# CLI-facing units of each parameter: (name, unit, factor applied to the SI value)
REPORT_UNITS = {
    'x': ('mm', 1e3),
    'y': ('mm', 1e3),
    'z': ('mm', 1e3),
    'phi': ('deg', 180.0 / math.pi),
    'theta': ('deg', 180.0 / math.pi),
    'psi': ('deg', 180.0 / math.pi),
    's': ('x1e-3', 1e3),
    'td': ('ms', 1e3),
}


def dataset_digests(scans, poses):
    """
    Digests identifying the exact inputs of a calibration.

    Returns:
        dict: SHA-256 of the scan and of the pose arrays.
    """
    scan_times = np.array([s.t for s in scans])
    scan_points = np.concatenate([s.points for s in scans]) if scans else np.zeros((0, 2))
    scan_valid = np.concatenate([s.valid for s in scans]) if scans else np.zeros(0, dtype=bool)
    pose_array = np.array([[p.t, *p.vector] for p in poses]).reshape(-1, 7)
    pose_cov = np.array([p.Q for p in poses]).reshape(-1, 6, 6)
    return {
        'scans': array_digest(scan_times, scan_points, scan_valid),
        'poses': array_digest(pose_array, pose_cov),
    }


def _finite_or_none(value):
    return value if value is not None and math.isfinite(value) else None


@dataclass
class CalibResult:
    """
    Outcome of a calibration run.

    Attributes:
        params (CalibParams): The estimated calibration.
        cost (float): Cost at the estimate.
        trace (list): (eval index, cost, best cost so far) per evaluation.
        stages (dict): Per-stage summaries (evals, wall_time, cost, ...).
        n_points (int): Mixture size the cost was evaluated on.
        config (dict): Echo of the settings used.
        digests (dict): Digests of the inputs.
        t_d (float): Estimated time offset in seconds, when estimated.

    Methods:
        to_dict() / from_dict(d): Plain-dict form.
        to_json() / from_json(s): JSON form.
        to_key_values(): Human-readable 'key = value' text, CLI units.
    """
    params: CalibParams
    cost: float
    trace: list = field(default_factory=list)
    stages: dict = field(default_factory=dict)
    n_points: int = 0
    config: dict = field(default_factory=dict)
    digests: dict = field(default_factory=dict)
    t_d: float = None

    @property
    def total_evals(self):
        return sum(stage.get('evals', 0) for stage in self.stages.values())

    def best_so_far(self):
        return [best for _, _, best in self.trace]

    def to_dict(self):
        return dict(
            params={name: getattr(self.params, name) for name in PARAM_NAMES},
            t_d=self.t_d,
            cost=_finite_or_none(self.cost),
            n_points=self.n_points,
            stages=self.stages,
            trace=[[i, _finite_or_none(f), _finite_or_none(b)] for i, f, b in self.trace],
            config=self.config,
            digests=self.digests,
        )

    @classmethod
    def from_dict(cls, data):
        def restore(value):
            return math.inf if value is None else value
        return cls(
            params=CalibParams(**data['params']),
            cost=restore(data.get('cost')),
            trace=[(int(i), restore(f), restore(b)) for i, f, b in data.get('trace', [])],
            stages=data.get('stages', {}),
            n_points=data.get('n_points', 0),
            config=data.get('config', {}),
            digests=data.get('digests', {}),
            t_d=data.get('t_d'),
        )

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, json_string):
        return cls.from_dict(json.loads(json_string))

    def to_key_values(self):
        """
        'key = value' lines: the parameters in params-file units first, then
        the run summary.
        """
        lines = params_to_lines(self.params, self.t_d)
        lines.append(f"cost = {float(self.cost)!r}")
        lines.append(f"n_points = {self.n_points}")
        lines.append(f"total_evals = {self.total_evals}")
        for name, stage in self.stages.items():
            lines.append(f"{name}_evals = {stage.get('evals')}")
            lines.append(f"{name}_wall_time = {float(stage.get('wall_time', 0.0))!r}")
        for name, digest in self.digests.items():
            lines.append(f"digest_{name} = {digest}")
        return "\n".join(lines) + "\n"


def params_to_lines(params, t_d=None):
    """
    Calibration parameters as 'key = value' lines in params-file units
    (metres, degrees, dimensionless scale, milliseconds).
    """
    lines = [
        f"x = {params.x!r}",
        f"y = {params.y!r}",
        f"z = {params.z!r}",
        f"phi_deg = {math.degrees(params.phi)!r}",
        f"theta_deg = {math.degrees(params.theta)!r}",
        f"psi_deg = {math.degrees(params.psi)!r}",
        f"s = {params.s!r}",
    ]
    if t_d is not None:
        lines.append(f"td_ms = {t_d * 1e3!r}")
    return lines


def parameter_errors(estimate, truth, estimate_td=None, truth_td=None):
    """
    Absolute per-parameter errors in report units.

    Angle differences are wrapped to (-pi, pi] before taking the magnitude.

    Args:
        estimate (CalibParams): Estimated calibration.
        truth (CalibParams): Ground truth.
        estimate_td (float): Estimated time offset, seconds.
        truth_td (float): True time offset, seconds.

    Returns:
        dict: name -> non-negative error, keys ordered x, y, z, phi, theta, psi, s[, td].
    """
    errors = {}
    for name in PARAM_NAMES:
        diff = getattr(estimate, name) - getattr(truth, name)
        if name in ('phi', 'theta', 'psi'):
            diff = wrap_angle(diff)
        errors[name] = abs(diff) * REPORT_UNITS[name][1]
    if estimate_td is not None and truth_td is not None:
        errors['td'] = abs(estimate_td - truth_td) * REPORT_UNITS['td'][1]
    return errors
