"""
Optimizer Module

Derivative-free search over the calibration vector: a controlled random
search (CRS2 with local mutation) for the coarse global stage, then a
Nelder-Mead simplex for the fine local stage. The scale is searched as log(s),
so every candidate has s > 0.

The optimizers work on plain search vectors inside a SearchSpace box and are
usable on any objective; calibrate() wires them to the entropy cost.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .entropy import CloudBuilder, CloudConfig, rqe_cost
from .errors import InvalidInputError, OptimizationFailedError, PreconditionError
from .geometry import CalibParams
from .results import CalibResult, dataset_digests

logger = logging.getLogger(__name__)

# coefficients of the simplex moves: reflection, expansion, contraction, shrink
NM_ALPHA, NM_GAMMA, NM_RHO, NM_SIGMA = 1.0, 2.0, 0.5, 0.5
MIN_SIMPLEX_VOLUME = 1e-300


@dataclass
class SearchSpace:
    """
    A box in search coordinates with a starting point.

    For calibration the coordinates are (x, y, z, phi, theta, psi, log s).

    Attributes:
        lower (np.ndarray): Lower bounds.
        upper (np.ndarray): Upper bounds, elementwise > lower.
        seed (np.ndarray): Initial guess, inside the box.
        rng_seed (int): Seed of the random stages.

    Methods:
        around(seed, ...): Default calibration bounds centered on a CalibParams guess.
        to_params(x): Converts a search vector to CalibParams.
        clip(x): Projects a vector onto the box.
    """
    lower: np.ndarray
    upper: np.ndarray
    seed: np.ndarray
    rng_seed: int = 0

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float).ravel()
        self.upper = np.asarray(self.upper, dtype=float).ravel()
        self.seed = np.asarray(self.seed, dtype=float).ravel()
        self.validate()

    def validate(self):
        if not (self.lower.shape == self.upper.shape == self.seed.shape):
            raise InvalidInputError("bounds and seed must have the same length")
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)) and np.all(np.isfinite(self.seed))):
            raise InvalidInputError("bounds and seed must be finite")
        if np.any(self.lower >= self.upper):
            raise InvalidInputError("every lower bound must be below its upper bound")
        if np.any(self.seed < self.lower) or np.any(self.seed > self.upper):
            raise InvalidInputError("seed lies outside the search bounds")

    @classmethod
    def around(cls, seed, translation=0.5, rotation=np.radians(15.0), scale_factor=4.0, rng_seed=0):
        """
        Bounds of +/- translation metres, +/- rotation radians and a scale
        within [s/scale_factor, s*scale_factor] around a calibration guess.
        """
        if translation <= 0 or rotation <= 0 or scale_factor <= 1:
            raise InvalidInputError("bound half-widths must be > 0 and scale_factor > 1")
        center = seed.to_search_vector()
        half = np.array([translation] * 3 + [rotation] * 3 + [np.log(scale_factor)])
        return cls(center - half, center + half, center, rng_seed)

    @property
    def dim(self):
        return len(self.seed)

    @property
    def width(self):
        return self.upper - self.lower

    @property
    def seed_params(self):
        return CalibParams.from_search_vector(self.seed)

    def to_params(self, x):
        return CalibParams.from_search_vector(x)

    def contains(self, x):
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def clip(self, x):
        return np.clip(x, self.lower, self.upper)


@dataclass
class OptimizerConfig:
    """
    Budgets and tolerances of the two search stages.

    Attributes:
        crs_population (int): CRS population size; None means 10 (dim + 1).
        crs_max_evals (int): Evaluation budget of the global stage.
        crs_ftol (float): CRS stops when the population cost spread falls below
            crs_ftol * |best cost|.
        nm_xtol (float or sequence): Per-parameter simplex size tolerance.
        nm_ftol (float): Relative simplex cost spread tolerance.
        nm_max_evals (int): Evaluation budget of the local stage.
        workers (int): Threads evaluating the initial CRS population.
        skip_global (bool): Run the local stage only, from the seed.
    """
    crs_population: int = None
    crs_max_evals: int = 3000
    crs_ftol: float = 1e-9
    nm_xtol: object = 1e-6
    nm_ftol: float = 1e-10
    nm_max_evals: int = 2000
    workers: int = 1
    skip_global: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.crs_population is not None and (int(self.crs_population) != self.crs_population or self.crs_population < 2):
            raise InvalidInputError(f"crs_population must be an integer >= 2, got {self.crs_population!r}")
        for name in ('crs_max_evals', 'nm_max_evals', 'workers'):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise InvalidInputError(f"{name} must be a positive integer, got {value!r}")
        if not self.crs_ftol > 0 or not self.nm_ftol > 0:
            raise InvalidInputError("tolerances must be > 0")
        if not np.all(np.asarray(self.nm_xtol, dtype=float) > 0):
            raise InvalidInputError("nm_xtol must be > 0")

    def population_size(self, dim):
        size = self.crs_population if self.crs_population is not None else 10 * (dim + 1)
        if size < 10 * (dim + 1):
            raise InvalidInputError(f"crs_population must be >= 10 (dim + 1) = {10 * (dim + 1)}, got {size}")
        return int(size)


class ObjectiveTracker:
    """
    Wraps an objective, counting evaluations and recording the cost trace.

    Non-finite costs are recorded and treated as +inf by the optimizers.

    Attributes:
        n_evals (int): Evaluations so far.
        trace (list): (eval index, cost, best cost so far) per evaluation.
        best_x (np.ndarray): Best point evaluated so far.
        best_f (float): Its cost.

    Methods:
        __call__(x): Evaluates one point.
        evaluate_many(xs): Evaluates points, concurrently if workers > 1,
            recording them in their given order.
    """
    def __init__(self, objective, workers=1):
        self.objective = objective
        self.workers = workers
        self.n_evals = 0
        self.trace = []
        self.best_x = None
        self.best_f = math.inf

    def _raw(self, x):
        f = float(self.objective(np.array(x, dtype=float)))
        return f if math.isfinite(f) else math.inf

    def _record(self, x, f):
        if f < self.best_f or self.best_x is None:
            self.best_f = f
            self.best_x = np.array(x, dtype=float)
        self.trace.append((self.n_evals, f, self.best_f))
        self.n_evals += 1
        return f

    def __call__(self, x):
        return self._record(x, self._raw(x))

    def evaluate_many(self, xs):
        xs = [np.asarray(x, dtype=float) for x in xs]
        if self.workers > 1 and len(xs) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                values = list(pool.map(self._raw, xs))
        else:
            values = [self._raw(x) for x in xs]
        return np.array([self._record(x, f) for x, f in zip(xs, values)])


@dataclass
class StageResult:
    """
    Outcome of one optimizer stage.

    Attributes:
        x (np.ndarray): Best search vector.
        fun (float): Its cost.
        n_evals (int): Evaluations spent in the stage.
        wall_time (float): Seconds spent.
        converged (bool): True if a tolerance, not the budget, ended the stage.
        message (str): Why the stage stopped.
    """
    x: np.ndarray
    fun: float
    n_evals: int
    wall_time: float
    converged: bool
    message: str = ""


def crs_search(objective, space, cfg=None, tracker=None):
    """
    Controlled random search, CRS2 variant with local mutation.

    The population is drawn uniformly in the box (with the seed as its first
    member). Each iteration reflects a random population point through the
    centroid of the best point and dim - 1 other random points; when the
    reflection leaves the box or does not beat the worst member, a local
    mutation around the best point is tried instead. Accepted trials replace
    the worst member.

    Args:
        objective (callable): Maps a search vector to a cost.
        space (SearchSpace): Bounds, seed and rng seed.
        cfg (OptimizerConfig): Budget and tolerances.
        tracker (ObjectiveTracker): Optional shared tracker.

    Returns:
        StageResult: The best point found. Deterministic given space.rng_seed.

    Raises:
        InvalidInputError: If crs_max_evals cannot pay for the initial population.
        OptimizationFailedError: If every evaluation of the initial population is non-finite.
    """
    cfg = cfg or OptimizerConfig()
    d = space.dim
    size = cfg.population_size(d)
    if cfg.crs_max_evals < size:
        raise InvalidInputError(
            f"crs_max_evals ({cfg.crs_max_evals}) is below the CRS population size ({size}) for {d} parameters")
    tracker = tracker or ObjectiveTracker(objective, cfg.workers)
    start_time = time.perf_counter()
    start_evals = tracker.n_evals
    rng = np.random.default_rng(space.rng_seed)

    population = space.lower + rng.random((size, d)) * space.width
    population[0] = space.seed
    costs = tracker.evaluate_many(population)
    if not np.any(np.isfinite(costs)):
        raise OptimizationFailedError("every cost of the initial CRS population is non-finite", trace=tracker.trace)

    def spent():
        return tracker.n_evals - start_evals

    converged = False
    message = "evaluation budget exhausted"
    while spent() < cfg.crs_max_evals:
        best = int(np.argmin(costs))
        worst = int(np.argmax(costs))
        spread = costs[worst] - costs[best]
        if np.isfinite(spread) and spread <= cfg.crs_ftol * abs(costs[best]):
            converged = True
            message = "population cost spread below crs_ftol"
            break
        if size - 1 < d:
            message = "population too small for a reflection"
            break
        others = rng.choice(np.delete(np.arange(size), best), size=d, replace=False)
        centroid = (population[best] + population[others[:-1]].sum(axis=0)) / d
        trial = 2.0 * centroid - population[others[-1]]
        if space.contains(trial):
            f_trial = tracker(trial)
            if f_trial < costs[worst]:
                population[worst], costs[worst] = trial, f_trial
                continue
            if spent() >= cfg.crs_max_evals:
                break
        w = rng.random(d)
        mutant = space.clip((1.0 + w) * population[best] - w * trial)
        f_mutant = tracker(mutant)
        if f_mutant < costs[worst]:
            population[worst], costs[worst] = mutant, f_mutant

    best = int(np.argmin(costs))
    result = StageResult(
        x=population[best].copy(),
        fun=float(costs[best]),
        n_evals=spent(),
        wall_time=time.perf_counter() - start_time,
        converged=converged,
        message=message,
    )
    assert result.fun <= min(f for _, f, _ in tracker.trace[start_evals:])
    logger.info("CRS: cost %.10g after %d evaluations (%s)", result.fun, result.n_evals, message)
    return result


def _simplex_volume(simplex):
    d = simplex.shape[1]
    edges = simplex[1:] - simplex[0]
    return abs(np.linalg.det(edges)) / math.factorial(d)


def _initial_simplex(seed, step, space=None):
    simplex = np.tile(seed, (len(seed) + 1, 1))
    if space is not None:
        # edges point back into the box where the forward step would leave it
        step = np.where(seed + step > space.upper, -step, step)
    simplex[1:] += np.diag(step)
    return simplex


def nelder_mead(objective, seed, cfg=None, space=None, step=None, tracker=None):
    """
    Nelder-Mead downhill simplex.

    Standard coefficients: reflection 1, expansion 2, contraction 0.5, shrink 0.5.
    The initial simplex extends the seed by 10% of each parameter's bound
    width (or by `step`). The stage stops when both the simplex extent is
    within nm_xtol and its cost spread within nm_ftol * max(|best|, 1), or when
    nm_max_evals is spent. Requiring both tolerances is stricter than stopping
    on either: a flat cost over a wide simplex does not end the stage.

    With a space, the search stays inside its box: trial points outside it
    cost +inf without calling the objective or spending budget, so a
    reflection that leaves the box turns into a contraction.

    A degenerate simplex is rebuilt once around the seed, perturbed by 1% of
    the step.

    Args:
        objective (callable): Maps a search vector to a cost.
        seed (np.ndarray): Starting point, inside the box when space is given.
        cfg (OptimizerConfig): Budget and tolerances.
        space (SearchSpace): Box of the search; its widths size the initial simplex.
        step (np.ndarray): Explicit initial edge lengths, overriding space.
        tracker (ObjectiveTracker): Optional shared tracker.

    Returns:
        StageResult: The best point evaluated, never worse than the seed.

    Raises:
        InvalidInputError: If the seed is non-finite or outside the box.
        OptimizationFailedError: If the simplex degenerates twice.
    """
    cfg = cfg or OptimizerConfig()
    tracker = tracker or ObjectiveTracker(objective, cfg.workers)
    seed = np.asarray(seed, dtype=float).ravel()
    if not np.all(np.isfinite(seed)):
        raise InvalidInputError("Nelder-Mead seed must be finite")
    if space is not None and not space.contains(seed):
        raise InvalidInputError("Nelder-Mead seed lies outside the search bounds")
    if step is None:
        step = 0.1 * space.width if space is not None else 0.1 * np.maximum(np.abs(seed), 1.0)
    step = np.broadcast_to(np.asarray(step, dtype=float), seed.shape)
    xtol = np.broadcast_to(np.asarray(cfg.nm_xtol, dtype=float), seed.shape)
    rng = np.random.default_rng(space.rng_seed if space is not None else 0)
    start_time = time.perf_counter()
    start_evals = tracker.n_evals

    def spent():
        return tracker.n_evals - start_evals

    def exhausted():
        return spent() >= cfg.nm_max_evals

    best_x, best_f = seed.copy(), math.inf

    def evaluate(x):
        nonlocal best_x, best_f
        if space is not None and not space.contains(x):
            return math.inf
        f = tracker(x)
        if f < best_f:
            best_x, best_f = np.array(x, dtype=float), f
        return f

    simplex = _initial_simplex(seed, step, space)
    costs = np.array([evaluate(v) for v in simplex[:max(1, min(len(simplex), cfg.nm_max_evals))]])
    restarted = False
    converged = False
    message = "evaluation budget exhausted"

    while len(costs) == len(simplex) and not exhausted():
        order = np.argsort(costs, kind='stable')
        simplex, costs = simplex[order], costs[order]
        x_spread = np.max(np.abs(simplex[1:] - simplex[0]), axis=0)
        f_spread = np.max(np.abs(costs[1:] - costs[0]))
        if np.all(x_spread <= xtol) and f_spread <= cfg.nm_ftol * max(abs(costs[0]), 1.0):
            converged = True
            message = "simplex within nm_xtol and nm_ftol"
            break
        if _simplex_volume(simplex) < MIN_SIMPLEX_VOLUME:
            if restarted:
                raise OptimizationFailedError("Nelder-Mead simplex degenerated twice", trace=tracker.trace)
            logger.warning("Nelder-Mead simplex degenerated; restarting once from a perturbed seed")
            restarted = True
            restart = seed + 0.01 * step * rng.standard_normal(len(seed))
            if space is not None:
                restart = space.clip(restart)
            simplex = _initial_simplex(restart, step, space)
            costs = []
            for v in simplex:
                if exhausted():
                    break
                costs.append(evaluate(v))
            costs = np.array(costs)
            continue

        centroid = simplex[:-1].mean(axis=0)
        reflected = centroid + NM_ALPHA * (centroid - simplex[-1])
        f_reflected = evaluate(reflected)
        if f_reflected < costs[0]:
            if exhausted():
                break
            expanded = centroid + NM_GAMMA * (reflected - centroid)
            f_expanded = evaluate(expanded)
            if f_expanded < f_reflected:
                simplex[-1], costs[-1] = expanded, f_expanded
            else:
                simplex[-1], costs[-1] = reflected, f_reflected
            continue
        if f_reflected < costs[-2]:
            simplex[-1], costs[-1] = reflected, f_reflected
            continue
        if exhausted():
            break
        if f_reflected < costs[-1]:
            contracted = centroid + NM_RHO * (reflected - centroid)
            f_contracted = evaluate(contracted)
            accept = f_contracted <= f_reflected
        else:
            contracted = centroid + NM_RHO * (simplex[-1] - centroid)
            f_contracted = evaluate(contracted)
            accept = f_contracted < costs[-1]
        if accept:
            simplex[-1], costs[-1] = contracted, f_contracted
            continue
        for i in range(1, len(simplex)):
            if exhausted():
                break
            simplex[i] = simplex[0] + NM_SIGMA * (simplex[i] - simplex[0])
            costs[i] = evaluate(simplex[i])

    result = StageResult(
        x=best_x,
        fun=float(best_f),
        n_evals=spent(),
        wall_time=time.perf_counter() - start_time,
        converged=converged,
        message=message,
    )
    assert result.fun <= min(f for _, f, _ in tracker.trace[start_evals:])
    logger.info("Nelder-Mead: cost %.10g after %d evaluations (%s)", result.fun, result.n_evals, message)
    return result


def calibration_objective(builder, space, cloud_cfg, mode='pruned'):
    """
    The entropy cost as a function of a search vector.
    """
    def objective(x):
        return rqe_cost(builder.build(space.to_params(x)), cloud_cfg, mode)
    return objective


def calibrate(scans, poses, space, opt_cfg=None, cloud_cfg=None, mode='pruned'):
    """
    Estimates the Sim(3) calibration by entropy minimization.

    Runs crs_search over the box, then nelder_mead seeded with its result.

    Args:
        scans (list[Scan]): Lidar scans, index-aligned with the poses.
        poses (list[Pose]): Base-sensor trajectory.
        space (SearchSpace): Bounds and seed in (x, y, z, phi, theta, psi, log s).
        opt_cfg (OptimizerConfig): Optimizer settings.
        cloud_cfg (CloudConfig): Cloud and cost settings.
        mode (str): 'pruned' or 'exact' cost.

    Returns:
        CalibResult: Final parameters, cost trace, per-stage counts and timings.

    Raises:
        PreconditionError: With fewer than 2 poses, no scan or no valid return.
    """
    opt_cfg = opt_cfg or OptimizerConfig()
    cloud_cfg = cloud_cfg or CloudConfig()
    scans, poses = list(scans), list(poses)
    if not scans:
        raise PreconditionError("calibration needs at least one scan")
    if len(poses) < 2:
        raise PreconditionError(f"calibration needs at least 2 poses, got {len(poses)}")
    if space.dim != 7:
        raise PreconditionError(f"calibration searches 7 parameters, the space has {space.dim}")
    builder = CloudBuilder(scans, poses, cloud_cfg)
    if len(builder) == 0:
        raise PreconditionError("calibration needs at least one valid lidar return")
    logger.info("calibrating on %d scans, %d points", len(scans), len(builder))

    tracker = ObjectiveTracker(calibration_objective(builder, space, cloud_cfg, mode), opt_cfg.workers)
    stages = {}
    x = space.seed
    if not opt_cfg.skip_global:
        crs = crs_search(None, space, opt_cfg, tracker=tracker)
        stages['crs'] = _stage_summary(crs)
        x = crs.x
    nm = nelder_mead(None, x, opt_cfg, space=space, tracker=tracker)
    stages['nelder_mead'] = _stage_summary(nm)
    params = space.to_params(tracker.best_x)

    return CalibResult(
        params=params,
        cost=float(tracker.best_f),
        trace=list(tracker.trace),
        stages=stages,
        n_points=len(builder),
        config={'optimizer': _echo(opt_cfg), 'cloud': _echo(cloud_cfg), 'mode': mode,
                'lower': space.lower.tolist(), 'upper': space.upper.tolist(),
                'seed': space.seed.tolist(), 'rng_seed': space.rng_seed},
        digests=dataset_digests(scans, poses),
    )


def _stage_summary(stage):
    return {'evals': stage.n_evals, 'wall_time': stage.wall_time, 'cost': stage.fun,
            'converged': stage.converged, 'message': stage.message}


def _echo(cfg):
    echo = {}
    for key, value in vars(cfg).items():
        if isinstance(value, np.ndarray):
            value = value.tolist()
        echo[key] = value
    return echo
