"""
Cost-function diagnostics.

One-parameter cost slices (each parameter varied alone around a reference
calibration, or the time offset varied alone), and the observability check
that flags parameters whose slice is flat compared to evaluation noise, the
signature of a degenerate trajectory.
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .entropy import CloudBuilder, CloudConfig, rqe_cost
from .errors import InvalidInputError
from .geometry import PARAM_NAMES
from .temporal import time_offset_objective, usable_scans

logger = logging.getLogger(__name__)

SLICE_PARAMS = PARAM_NAMES + ('td',)


def cost_slice(scans, poses, params, param, offsets, cloud_cfg=None, mode='pruned', geodesic=True):
    """
    The cost along one parameter, the others held at `params`.

    Args:
        scans (list[Scan]): Lidar scans. For 'td' they keep their recorded
            timestamps; for the spatial parameters they must already be
            paired with the poses.
        poses (list[Pose]): Base-sensor trajectory.
        params (CalibParams): Reference calibration.
        param (str): One of x, y, z, phi, theta, psi, s, td.
        offsets (array-like): Offsets added to the reference value, in SI
            units (metres, radians, scale units, seconds). For 'td' the
            reference is 0.
        cloud_cfg (CloudConfig): Cloud and cost settings.
        mode (str): 'pruned' or 'exact'.
        geodesic (bool): Rotation interpolation mode for 'td'.

    Returns:
        pandas.DataFrame: Columns offset, value, cost.
    """
    if param not in SLICE_PARAMS:
        raise InvalidInputError(f"param must be one of {SLICE_PARAMS}, got {param!r}")
    cloud_cfg = cloud_cfg or CloudConfig()
    offsets = np.asarray(offsets, dtype=float)
    if param == 'td':
        subset = usable_scans(scans, poses, offsets.min(initial=0.0), offsets.max(initial=0.0))
        objective = time_offset_objective(subset, poses, params, cloud_cfg, geodesic, mode)
        values = offsets
        costs = [objective(t_d) for t_d in offsets]
    else:
        base = getattr(params, param)
        values = base + offsets
        if param == 's' and np.any(values <= 0):
            raise InvalidInputError("scale slice must stay above 0")
        builder = CloudBuilder(scans, poses, cloud_cfg)
        costs = [rqe_cost(builder.build(params.replace(**{param: v})), cloud_cfg, mode) for v in values]
    return pd.DataFrame({'offset': offsets, 'value': values, 'cost': np.asarray(costs, dtype=float)})


@dataclass
class ObservabilityVerdict:
    """
    Attributes:
        param (str): Parameter name.
        variation (float): Cost range of its slice across the bound width.
        noise (float): Estimated cost evaluation noise.
        observable (bool): variation > ratio * noise.
    """
    param: str
    variation: float
    noise: float
    observable: bool


def observability_check(scans, poses, space, cloud_cfg=None, steps=11, ratio=10.0,
                        noise_samples=8, mode='pruned'):
    """
    Flags calibration parameters the trajectory leaves unobservable.

    Each parameter is swept across its bound width around the seed of
    `space`. Evaluation noise is the standard deviation of the cost change
    under random relative perturbations of 1e-7 of the bound widths. A
    parameter whose slice varies by no more than `ratio` times that noise is
    reported (and logged) as unobservable; nothing is rejected.

    Returns:
        dict: param -> ObservabilityVerdict.
    """
    cloud_cfg = cloud_cfg or CloudConfig()
    builder = CloudBuilder(scans, poses, cloud_cfg)
    rng = np.random.default_rng(space.rng_seed)

    def cost(x):
        return rqe_cost(builder.build(space.to_params(x)), cloud_cfg, mode)

    base_cost = cost(space.seed)
    jitter = [cost(space.clip(space.seed + 1e-7 * space.width * rng.standard_normal(space.dim))) - base_cost
              for _ in range(noise_samples)]
    noise = float(np.std(np.concatenate([[0.0], jitter])))

    verdicts = {}
    for i, name in enumerate(PARAM_NAMES):
        sweep = np.linspace(space.lower[i], space.upper[i], steps)
        slice_costs = []
        for value in sweep:
            x = space.seed.copy()
            x[i] = value
            slice_costs.append(cost(x))
        variation = float(np.max(slice_costs) - np.min(slice_costs))
        observable = variation > ratio * noise
        verdicts[name] = ObservabilityVerdict(name, variation, noise, observable)
        if not observable:
            logger.warning("parameter %s looks unobservable: slice variation %.3g vs noise %.3g",
                           name, variation, noise)
    return verdicts
