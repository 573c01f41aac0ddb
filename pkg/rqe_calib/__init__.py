from .geometry import CalibParams, Pose, Scan, Transform, WorldPoint
from .entropy import CloudBuilder, CloudConfig, GmmCloud, build_cloud, rqe_cost, renyi_entropy
from .optimizer import OptimizerConfig, SearchSpace, calibrate
from .temporal import TimeAlignConfig, calibrate_with_time, time_align
from .simulator import LidarModel, NoiseModel, TrajectorySpec, build_environment, make_dataset
from .results import CalibResult, parameter_errors
from .errors import CalibrationError
