"""Particle swarm search over network hyperparameters.

Positions live in an internal coordinate system: log-scale axes are
searched in ``log10`` units and integer axes are relaxed to the reals and
rounded only when a position is decoded for evaluation.
"""

import csv
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericalError, UndefinedResultError
from .network import NetworkSpec, TrainConfig, predict_risk, train
from .seeding import derive_seed, stream
from .survival import SurvivalData, concordance_index

__all__ = [
    "Axis",
    "SearchSpace",
    "SwarmConfig",
    "TraceRow",
    "PSOResult",
    "initial_positions",
    "pso_optimize",
    "make_folds",
    "cv_objective",
    "spec_from_params",
    "NetworkScorer",
    "fit_network",
    "tune_network",
    "write_trace_csv",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Axis:
    name: str
    lower: float
    upper: float
    log: bool = False
    integer: bool = False

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ConfigError(f"axis {self.name}: lower bound {self.lower} must be below upper bound {self.upper}")
        if self.log and self.lower <= 0:
            raise ConfigError(f"axis {self.name}: log-scale bounds must be positive")

    @property
    def internal_bounds(self):
        if self.log:
            return math.log10(self.lower), math.log10(self.upper)
        return float(self.lower), float(self.upper)

    def decode(self, value: float):
        if self.log:
            value = 10.0 ** value
            value = min(max(value, self.lower), self.upper)
        if self.integer:
            return int(round(value))
        return float(value)


@dataclass(frozen=True)
class SearchSpace:
    axes: tuple

    def __post_init__(self):
        names = [a.name for a in self.axes]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate axis names in {names}")
        if not names:
            raise ConfigError("search space has no axes")

    @classmethod
    def default(cls) -> "SearchSpace":
        """The network search ranges: dropout, hidden units, code size, alpha, learning rate, L1."""
        return cls((
            Axis("dropout_rate", 0.1, 0.9),
            Axis("hidden_units", 75, 250, integer=True),
            Axis("latent_dim", 5, 20, integer=True),
            Axis("alpha", 0.3, 0.7),
            Axis("learning_rate", 1e-6, 10 ** -4.5, log=True),
            Axis("l1_penalty", 1e-7, 1e-4, log=True),
        ))

    @classmethod
    def box(cls, lower: Sequence[float], upper: Sequence[float], prefix: str = "x") -> "SearchSpace":
        return cls(tuple(Axis(f"{prefix}{i}", lo, hi) for i, (lo, hi) in enumerate(zip(lower, upper))))

    @property
    def names(self) -> List[str]:
        return [a.name for a in self.axes]

    @property
    def dim(self) -> int:
        return len(self.axes)

    def bounds(self):
        lo, hi = zip(*(a.internal_bounds for a in self.axes))
        return np.array(lo), np.array(hi)

    def decode(self, position) -> Dict[str, float]:
        return {a.name: a.decode(float(x)) for a, x in zip(self.axes, position)}


@dataclass
class SwarmConfig:
    n_particles: int = 20
    n_iterations: int = 50
    inertia: float = 0.729
    cognitive: float = 1.494
    social: float = 1.494
    seed: int = 0
    cv_folds: int = 6
    max_velocity: float = 0.2

    def validate(self) -> None:
        if self.n_particles < 2:
            raise ConfigError(f"n_particles must be >= 2, got {self.n_particles}")
        if self.n_iterations < 1:
            raise ConfigError(f"n_iterations must be >= 1, got {self.n_iterations}")
        if self.cv_folds < 2:
            raise ConfigError(f"cv_folds must be >= 2, got {self.cv_folds}")
        if not self.max_velocity > 0:
            raise ConfigError(f"max_velocity must be positive, got {self.max_velocity}")


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    particle: int
    position: Dict[str, float]
    score: float
    gbest_score: float


@dataclass
class PSOResult:
    best_position: Dict[str, float]
    best_score: float
    best_internal: np.ndarray
    trace: List[TraceRow] = field(default_factory=list)
    gbest_history: List[float] = field(default_factory=list)


def initial_positions(space: SearchSpace, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws in internal coordinates (log-uniform on log axes)."""
    lo, hi = space.bounds()
    return lo + rng.random((n, space.dim)) * (hi - lo)


def _evaluate(objective, params, seed) -> float:
    try:
        score = float(objective(params, seed))
    except NumericalError as exc:
        log.warning("objective failed at %s: %s", params, exc)
        score = float("nan")
    if math.isnan(score):
        warnings.warn(f"objective returned NaN at {params}; scoring as -inf", RuntimeWarning, stacklevel=3)
        return -math.inf
    return score


def pso_optimize(objective: Callable[[Dict[str, float], int], float], space: SearchSpace,
                 config: SwarmConfig = None, *, jobs: int = 1) -> PSOResult:
    """Maximise ``objective`` with a global-best particle swarm.

    ``objective(params, seed)`` receives the decoded position and an
    evaluation seed derived from ``(config.seed, particle, iteration)``.
    The first iteration scores the initial swarm; each later iteration
    applies ``v <- w v + c1 r1 (pbest - x) + c2 r2 (gbest - x)``, caps each
    velocity component at ``max_velocity`` times the axis width, moves the
    particles, clamps them to the box (zeroing the velocity components
    that hit a bound) and scores them again. Evaluations within an
    iteration may run on ``jobs`` threads; results do not depend on
    evaluation order.
    """
    config = config or SwarmConfig()
    config.validate()
    P, D = config.n_particles, space.dim
    lo, hi = space.bounds()
    rng = stream(config.seed, "pso")
    x = initial_positions(space, P, rng)
    v = (lo + rng.random((P, D)) * (hi - lo) - x) / 2.0
    vmax = config.max_velocity * (hi - lo)

    pbest = x.copy()
    pbest_score = np.full(P, -np.inf)
    gbest = x[0].copy()
    gbest_score = -np.inf
    trace, history = [], []
    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        for it in range(1, config.n_iterations + 1):
            if it > 1:
                r1 = rng.random((P, D))
                r2 = rng.random((P, D))
                v = config.inertia * v + config.cognitive * r1 * (pbest - x) + config.social * r2 * (gbest - x)
                v = np.clip(v, -vmax, vmax)
                x = x + v
                out = (x < lo) | (x > hi)
                x = np.clip(x, lo, hi)
                v[out] = 0.0
            decoded = [space.decode(p) for p in x]
            seeds = [derive_seed(config.seed, "eval", k, it) for k in range(P)]
            if pool is None:
                scores = [_evaluate(objective, d, s) for d, s in zip(decoded, seeds)]
            else:
                scores = list(pool.map(lambda ds: _evaluate(objective, *ds), zip(decoded, seeds)))
            scores = np.array(scores)
            better = scores > pbest_score
            pbest[better] = x[better]
            pbest_score[better] = scores[better]
            k = int(np.argmax(pbest_score))
            if pbest_score[k] > gbest_score:
                gbest_score = float(pbest_score[k])
                gbest = pbest[k].copy()
            history.append(gbest_score)
            trace.extend(TraceRow(it, p, decoded[p], float(scores[p]), gbest_score) for p in range(P))
            log.info("pso iteration %d/%d: gbest %.6g", it, config.n_iterations, gbest_score)
    finally:
        if pool is not None:
            pool.shutdown()
    return PSOResult(space.decode(gbest), gbest_score, gbest, trace, history)


def make_folds(outcomes: SurvivalData, k: int, seed: int, *, max_retries: int = 100) -> List[np.ndarray]:
    """Random k-fold partition in which every fold holds at least one event."""
    n = len(outcomes)
    if k < 2 or n < k:
        raise ConfigError(f"cannot split {n} subjects into {k} folds")
    if outcomes.n_events < k:
        raise ConfigError(f"{outcomes.n_events} events cannot populate {k} folds")
    for attempt in range(max_retries):
        perm = stream(seed, "folds", attempt).permutation(n)
        folds = [np.sort(f) for f in np.array_split(perm, k)]
        if all(outcomes.event[f].any() for f in folds):
            return folds
    raise ConfigError(f"no event-containing {k}-fold partition found in {max_retries} draws")


def spec_from_params(input_dim: int, params: Dict[str, float], base: Optional[NetworkSpec] = None) -> NetworkSpec:
    base = base or NetworkSpec(input_dim)
    known = {k: v for k, v in params.items() if k in NetworkSpec.__dataclass_fields__}
    return replace(base, input_dim=input_dim, **known)


class NetworkScorer:
    """Risk-scoring function backed by a trained network."""

    def __init__(self, model, hyperparameters: Dict[str, float]):
        self.model = model
        self.hyperparameters = dict(hyperparameters)

    def __call__(self, features) -> np.ndarray:
        return predict_risk(self.model, np.atleast_2d(features))


def fit_network(params: Dict[str, float], features, outcomes: SurvivalData, seed: int,
                train_config: TrainConfig = None) -> NetworkScorer:
    """Train a network with hyperparameters ``params``."""
    features = np.asarray(features, dtype=float)
    spec = spec_from_params(features.shape[1], params)
    cfg = replace(train_config or TrainConfig(), seed=seed)
    return NetworkScorer(train(spec, features, outcomes, cfg), params)


def cv_objective(features, outcomes: SurvivalData, folds: int = 6, seed: int = 0, *,
                 train_config: TrainConfig = None, fit: Callable = None) -> Callable:
    """Mean held-out concordance over a fixed k-fold partition.

    The partition depends only on ``seed``. ``fit(params, X, outcomes,
    seed)`` must return a risk-scoring function; it defaults to training
    the survival autoencoder. Folds whose concordance is undefined are
    skipped; the objective is NaN if every fold is undefined or a model
    emits non-finite risks.
    """
    X = np.asarray(features, dtype=float)
    partition = make_folds(outcomes, folds, seed)
    n = X.shape[0]
    if fit is None:
        def fit(params, Xtr, otr, s):
            return fit_network(params, Xtr, otr, s, train_config)

    def objective(params, eval_seed=0):
        scores = []
        for j, held in enumerate(partition):
            train_idx = np.setdiff1d(np.arange(n), held)
            scorer = fit(params, X[train_idx], outcomes[train_idx], derive_seed(eval_seed, "fold", j))
            risks = np.asarray(scorer(X[held]), dtype=float)
            if not np.all(np.isfinite(risks)):
                return float("nan")
            try:
                scores.append(concordance_index(risks, outcomes[held]))
            except UndefinedResultError:
                continue
        return float(np.mean(scores)) if scores else float("nan")

    objective.folds = partition
    return objective


def tune_network(features, outcomes: SurvivalData, space: SearchSpace = None, swarm: SwarmConfig = None, *,
                 train_config: TrainConfig = None, jobs: int = 1) -> PSOResult:
    """Particle swarm search of network hyperparameters by cross-validated concordance."""
    space = space or SearchSpace.default()
    swarm = swarm or SwarmConfig()
    objective = cv_objective(features, outcomes, swarm.cv_folds, derive_seed(swarm.seed, "cv"),
                             train_config=train_config)
    return pso_optimize(objective, space, swarm, jobs=jobs)


def write_trace_csv(path, result: PSOResult, space: SearchSpace) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "particle", *space.names, "score", "gbest_score"])
        for row in result.trace:
            writer.writerow([row.iteration, row.particle, *(repr(row.position[n]) for n in space.names),
                             repr(row.score), repr(row.gbest_score)])
