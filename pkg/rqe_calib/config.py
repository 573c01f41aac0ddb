"""
Run configuration.

A calibration run is configured by a flat 'key = value' file. Every key maps
onto a field of one of the config dataclasses; unknown or duplicate keys are
errors. Angles are given in degrees and time offsets in milliseconds, the
units the command line reports in; everything is converted to radians and
seconds on parsing.
"""

import logging
import math
from dataclasses import dataclass, field

from .attrdict import AttrDict
from .entropy import CloudConfig
from .errors import CalibrationError, ConfigError
from .geometry import CalibParams
from .optimizer import OptimizerConfig, SearchSpace
from .temporal import TimeAlignConfig

logger = logging.getLogger(__name__)

_TRUE = ('true', 'yes', 'on', '1')
_FALSE = ('false', 'no', 'off', '0')


def _to_bool(text):
    lowered = text.lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _to_int(text):
    return int(text)


def _to_optional_int(text):
    return None if text.lower() == 'none' else int(text)


def _to_float(text):
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(f"expected a finite number, got {text!r}")
    return value


def _to_optional_float(text):
    return None if text.lower() == 'none' else _to_float(text)


def _to_str(text):
    return text


def _degrees(text):
    return math.radians(_to_float(text))


def _milliseconds(text):
    return _to_float(text) * 1e-3


# key -> (section, field, converter)
CONFIG_KEYS = {
    'sigma_kernel': ('cloud', 'sigma_kernel', _to_float),
    'k_prune': ('cloud', 'k_prune', _to_float),
    'prune_bound': ('cloud', 'prune_bound', _to_str),
    'subsample_stride': ('cloud', 'subsample_stride', _to_int),
    'max_points': ('cloud', 'max_points', _to_int),
    'freeze_covariance': ('cloud', 'freeze_covariance', _to_bool),
    'range_min': ('cloud', 'range_min', _to_optional_float),
    'range_max': ('cloud', 'range_max', _to_optional_float),
    'block_pairs': ('cloud', 'block_pairs', _to_int),
    'workers': ('run', 'workers', _to_int),
    'crs_population': ('optimizer', 'crs_population', _to_optional_int),
    'crs_max_evals': ('optimizer', 'crs_max_evals', _to_int),
    'crs_ftol': ('optimizer', 'crs_ftol', _to_float),
    'nm_xtol': ('optimizer', 'nm_xtol', _to_float),
    'nm_ftol': ('optimizer', 'nm_ftol', _to_float),
    'nm_max_evals': ('optimizer', 'nm_max_evals', _to_int),
    'skip_global': ('optimizer', 'skip_global', _to_bool),
    'estimate_time_offset': ('run', 'estimate_time_offset', _to_bool),
    'td_min_ms': ('time', 'td_min', _milliseconds),
    'td_max_ms': ('time', 'td_max', _milliseconds),
    'td_resolution_ms': ('time', 'resolution', _milliseconds),
    'refinement_passes': ('time', 'refinement_passes', _to_int),
    'geodesic_interpolation': ('time', 'geodesic', _to_bool),
    'seed_x': ('seed', 'x', _to_float),
    'seed_y': ('seed', 'y', _to_float),
    'seed_z': ('seed', 'z', _to_float),
    'seed_phi': ('seed', 'phi', _degrees),
    'seed_theta': ('seed', 'theta', _degrees),
    'seed_psi': ('seed', 'psi', _degrees),
    'seed_s': ('seed', 's', _to_float),
    'bound_translation': ('run', 'bound_translation', _to_float),
    'bound_rotation': ('run', 'bound_rotation', _degrees),
    'bound_scale_factor': ('run', 'bound_scale_factor', _to_float),
    'rng_seed': ('run', 'rng_seed', _to_int),
}


@dataclass
class RunConfig:
    """
    Everything a calibration run needs besides the data.

    Attributes:
        cloud (CloudConfig): Cloud and cost settings.
        optimizer (OptimizerConfig): Search budgets and tolerances.
        time (TimeAlignConfig): Time-offset search settings.
        estimate_time_offset (bool): Run the temporal pre-calibration first.
        seed (CalibParams): Initial calibration guess.
        bound_translation (float): Search half-width around the seed, metres.
        bound_rotation (float): Search half-width around the seed, radians.
        bound_scale_factor (float): Scale searched within [s / f, s * f].
        rng_seed (int): Seed of the global search.
        workers (int): Threads for the cost sum and the CRS population.
    """
    cloud: CloudConfig = field(default_factory=CloudConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    time: TimeAlignConfig = field(default_factory=TimeAlignConfig)
    estimate_time_offset: bool = False
    seed: CalibParams = field(default_factory=CalibParams)
    bound_translation: float = 0.5
    bound_rotation: float = math.radians(15.0)
    bound_scale_factor: float = 4.0
    rng_seed: int = 0
    workers: int = 1

    def search_space(self):
        return SearchSpace.around(
            self.seed,
            translation=self.bound_translation,
            rotation=self.bound_rotation,
            scale_factor=self.bound_scale_factor,
            rng_seed=self.rng_seed,
        )

    def to_key_values(self):
        """
        The configuration as config-file text; parse_config() reads it back.
        """
        values = {
            'cloud': vars(self.cloud),
            'optimizer': vars(self.optimizer),
            'time': vars(self.time),
            'seed': {name: getattr(self.seed, name) for name in ('x', 'y', 'z', 'phi', 'theta', 'psi', 's')},
            'run': vars(self),
        }
        lines = []
        for key, (section, name, converter) in CONFIG_KEYS.items():
            value = values[section][name]
            if converter is _degrees:
                value = math.degrees(value)
            elif converter is _milliseconds:
                value = value * 1e3
            if isinstance(value, bool):
                value = str(value).lower()
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def parse_config(text, source="<string>"):
    """
    Parses config-file text into a RunConfig.

    Args:
        text (str): 'key = value' lines.
        source (str): Name used in error messages.

    Returns:
        RunConfig: Defaults overridden by the given keys.

    Raises:
        ConfigError: On unknown, duplicate or malformed keys, unconvertible
            values, or settings the config types reject.
    """
    items = AttrDict.from_key_values(text, source)
    items.check_known(CONFIG_KEYS, source)
    sections = {'cloud': {}, 'optimizer': {}, 'time': {}, 'seed': {}, 'run': {}}
    for key, raw in items.items():
        section, name, converter = CONFIG_KEYS[key]
        try:
            sections[section][name] = converter(raw)
        except ValueError as e:
            raise ConfigError(f"{source}:{items.line_of(key)}: bad value for '{key}': {e}")

    run = sections['run']
    workers = run.get('workers', 1)
    try:
        config = RunConfig(
            cloud=CloudConfig(workers=workers, **sections['cloud']),
            optimizer=OptimizerConfig(workers=workers, **sections['optimizer']),
            time=TimeAlignConfig(**sections['time']),
            seed=CalibParams(**sections['seed']),
            **run,
        )
        config.search_space()
    except CalibrationError as e:
        raise ConfigError(f"{source}: {e}")
    logger.debug("configuration read from %s: %d keys", source, len(items))
    return config


def load_config(path):
    """
    Reads a config file; see parse_config.
    """
    with open(path, 'r', encoding='utf-8') as f:
        return parse_config(f.read(), source=str(path))
