"""
Command-line interface.

    rqe_calib simulate     --env NAME --seed N --duration S --out DIR [--td MS] [--noiseless]
    rqe_calib calibrate    --data DIR [--config FILE] --out RESULT
    rqe_calib cost-slice   --data DIR --param P --range A B --steps N [--params FILE] [--out CSV]
    rqe_calib cost         --data DIR [--params FILE] [--mode exact|pruned]
    rqe_calib export-cloud --data DIR --params FILE --out cloud.ply
    rqe_calib evaluate     --result FILE --truth FILE

Values on the command line and in reports use metres, degrees, the plain
scale factor and milliseconds. Exit code 0 on success, 1 when the
operation failed, 2 on a usage error.
"""

import argparse
import logging
import math
import sys
from dataclasses import asdict, replace

import numpy as np

from .config import RunConfig, load_config
from .diagnostics import SLICE_PARAMS, cost_slice, observability_check
from .entropy import MODES, CloudBuilder, entropy_report
from .errors import CalibrationError, PreconditionError
from .fileio import (export_ply, load_dataset, read_params, read_result, save_dataset, write_csv,
                     write_result)
from .optimizer import calibrate
from .results import REPORT_UNITS, parameter_errors
from .simulator import ENVIRONMENTS, NoiseModel, build_environment, make_dataset
from .temporal import align_to_trajectory, calibrate_with_time, pair_scans_with_poses
from .utils import file_digest, setup_logging

logger = logging.getLogger(__name__)

# factor from CLI units to SI, per slice parameter
CLI_TO_SI = {
    'x': 1.0, 'y': 1.0, 'z': 1.0,
    'phi': math.pi / 180.0, 'theta': math.pi / 180.0, 'psi': math.pi / 180.0,
    's': 1.0,
    'td': 1e-3,
}


def _reference(args, dataset):
    """
    The calibration a command evaluates at: --params if given, else the dataset's ground truth.
    """
    if getattr(args, 'params', None):
        return read_result(args.params)
    if dataset.truth is None:
        raise PreconditionError("no --params given and the dataset carries no ground truth")
    return dataset.truth, dataset.t_d


def _paired(dataset, t_d, geodesic=True):
    if t_d:
        scans, poses = align_to_trajectory(dataset.scans, dataset.poses, t_d, geodesic)
    else:
        scans, poses = pair_scans_with_poses(dataset.scans, dataset.poses, geodesic)
    if not scans:
        raise PreconditionError("no scan overlaps the trajectory")
    return scans, poses


def _run_config(args):
    return load_config(args.config) if getattr(args, 'config', None) else RunConfig()


def cmd_simulate(args):
    env = build_environment(args.env)
    spec = replace(env.trajectory, duration=args.duration, rng_seed=args.seed)
    noise = NoiseModel.none(args.seed) if args.noiseless else NoiseModel(rng_seed=args.seed)
    truth = read_params(args.truth)[0] if args.truth else None
    dataset = make_dataset(env, spec, noise=noise, true_params=truth, t_d=args.td * 1e-3, workers=args.workers)
    dataset.metadata.update(seed=args.seed, noiseless=args.noiseless)
    manifest = save_dataset(dataset, args.out)
    for name, digest in manifest['digests'].items():
        print(f"digest_{name} = {digest}")
    return 0


def cmd_calibrate(args):
    config = _run_config(args)
    dataset = load_dataset(args.data)
    space = config.search_space()

    def check(scans, poses):
        if args.check_observability:
            observability_check(scans, poses, space, config.cloud, mode=args.mode)

    if config.estimate_time_offset:
        result = calibrate_with_time(dataset.scans, dataset.poses, space, config.optimizer, config.time,
                                     config.cloud, args.mode, on_aligned=check)
    else:
        scans, poses = _paired(dataset, 0.0, config.time.geodesic)
        check(scans, poses)
        result = calibrate(scans, poses, space, config.optimizer, config.cloud, args.mode)
    if args.config:
        result.digests['config'] = file_digest(args.config)
    write_result(args.out, result)
    sys.stdout.write(result.to_key_values())
    return 0


def cmd_cost_slice(args):
    config = _run_config(args)
    dataset = load_dataset(args.data)
    params, t_d = _reference(args, dataset)
    factor = CLI_TO_SI[args.param]
    offsets = np.linspace(args.range[0], args.range[1], args.steps) * factor
    if args.param == 'td':
        scans, poses = dataset.scans, dataset.poses
    else:
        scans, poses = _paired(dataset, t_d, config.time.geodesic)
    frame = cost_slice(scans, poses, params, args.param, offsets, config.cloud, args.mode, config.time.geodesic)
    frame['offset'] /= factor
    frame['value'] /= factor
    write_csv(args.out or sys.stdout, frame)
    return 0


def cmd_cost(args):
    config = _run_config(args)
    dataset = load_dataset(args.data)
    params, t_d = _reference(args, dataset)
    scans, poses = _paired(dataset, t_d, config.time.geodesic)
    cloud = CloudBuilder(scans, poses, config.cloud).build(params)
    report = entropy_report(cloud, config.cloud, args.mode)
    for key, value in asdict(report).items():
        print(f"{key} = {value!r}" if isinstance(value, float) else f"{key} = {value}")
    return 0 if report.cost_defined else 1


def cmd_export_cloud(args):
    config = _run_config(args)
    dataset = load_dataset(args.data)
    params, t_d = read_result(args.params)
    scans, poses = _paired(dataset, t_d, config.time.geodesic)
    export_ply(CloudBuilder(scans, poses, config.cloud).build(params), args.out)
    return 0


def cmd_evaluate(args):
    estimate, estimate_td = read_result(args.result)
    truth, truth_td = read_params(args.truth)
    errors = parameter_errors(estimate, truth, estimate_td, truth_td)
    for name, error in errors.items():
        print(f"{name}_{REPORT_UNITS[name][0]} = {error!r}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog='rqe_calib', description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true', help='log debug detail')
    verbosity.add_argument('-q', '--quiet', action='store_true', help='log warnings and errors only')
    commands = parser.add_subparsers(dest='command', required=True)

    p = commands.add_parser('simulate', help='simulate a calibration dataset')
    p.add_argument('--env', required=True, choices=sorted(ENVIRONMENTS), help='environment name')
    p.add_argument('--seed', type=int, default=0, help='trajectory and noise seed')
    p.add_argument('--duration', type=float, default=50.0, help='seconds')
    p.add_argument('--td', type=float, default=0.0, help='lidar delay to inject, ms')
    p.add_argument('--noiseless', action='store_true', help='no pose or range noise')
    p.add_argument('--truth', help='params file with the calibration to simulate')
    p.add_argument('--workers', type=int, default=1, help='raycasting threads')
    p.add_argument('--out', required=True, help='output directory')
    p.set_defaults(func=cmd_simulate)

    p = commands.add_parser('calibrate', help='estimate the calibration of a dataset')
    p.add_argument('--data', required=True, help='dataset directory')
    p.add_argument('--config', help='config file')
    p.add_argument('--mode', choices=MODES, default='pruned', help='cost evaluation')
    p.add_argument('--check-observability', action='store_true',
                   help='warn about parameters the trajectory leaves unobservable')
    p.add_argument('--out', required=True, help='result path; .txt and .json are written')
    p.set_defaults(func=cmd_calibrate)

    p = commands.add_parser('cost-slice', help='cost along one parameter, as CSV')
    p.add_argument('--data', required=True, help='dataset directory')
    p.add_argument('--param', required=True, choices=SLICE_PARAMS)
    p.add_argument('--range', required=True, type=float, nargs=2, metavar=('A', 'B'),
                   help='offsets from the reference: m, deg, scale units or ms')
    p.add_argument('--steps', type=int, default=41)
    p.add_argument('--params', help='reference params or result file (default: ground truth)')
    p.add_argument('--config', help='config file')
    p.add_argument('--mode', choices=MODES, default='pruned')
    p.add_argument('--out', help='CSV path (default: stdout)')
    p.set_defaults(func=cmd_cost_slice)

    p = commands.add_parser('cost', help='evaluate the cost once and report pair counts and timing')
    p.add_argument('--data', required=True, help='dataset directory')
    p.add_argument('--params', help='params or result file (default: ground truth)')
    p.add_argument('--config', help='config file')
    p.add_argument('--mode', choices=MODES, default='pruned')
    p.set_defaults(func=cmd_cost)

    p = commands.add_parser('export-cloud', help='write the reconstructed cloud as PLY')
    p.add_argument('--data', required=True, help='dataset directory')
    p.add_argument('--params', required=True, help='params or result file')
    p.add_argument('--config', help='config file')
    p.add_argument('--out', required=True, help='PLY path')
    p.set_defaults(func=cmd_export_cloud)

    p = commands.add_parser('evaluate', help='per-parameter errors of a result against ground truth')
    p.add_argument('--result', required=True, help='result file (.txt or .json)')
    p.add_argument('--truth', required=True, help='params file')
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    """
    Runs one command.

    Returns:
        int: The exit code.
    """
    args = build_parser().parse_args(argv)
    if args.verbose:
        setup_logging(logging.DEBUG)
    elif args.quiet:
        setup_logging(logging.WARNING)
    else:
        setup_logging(logging.INFO)
    if getattr(args, 'steps', 1) < 1:
        print("error: --steps must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (CalibrationError, OSError) as e:
        logger.debug("command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
