"""Bootstrap internal validation, risk stratification and model comparison.

The bootstrap procedure follows the usual optimism correction: fit on the
full sample (apparent concordance), refit on ``B`` resamples, and
subtract the mean gap between each refit's concordance on its own
resample and on the original sample.
"""

import csv
import hashlib
import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Protocol, Sequence

import numpy as np

from .errors import MalformedInputError, NumericalError, StratificationError
from .hyperopt import SearchSpace, SwarmConfig, fit_network, make_folds, tune_network
from .network import TrainConfig
from .seeding import derive_seed, stream
from .survival import (
    Z_95,
    KaplanMeier,
    LogRankResult,
    SurvivalData,
    concordance_index,
    cox_loss_and_gradient,
    fit_cox_l2,
)

__all__ = [
    "Trainer",
    "Replicate",
    "ValidationReport",
    "bootstrap_optimism",
    "NetworkTrainer",
    "CoxScorer",
    "benchmark_conventional",
    "stratify_by_median_risk",
    "ComparisonResult",
    "compare_models",
    "dataset_digest",
    "write_report_json",
    "read_report_json",
    "write_km_csv",
    "write_logrank_csv",
]

log = logging.getLogger(__name__)

CI_METHOD = "normal approximation: corrected_c +/- 1.96 * sd(apparent_c - optimism_b)"


class Trainer(Protocol):
    """Full model-building pipeline, deterministic given ``(data, seed)``."""

    def __call__(self, features: np.ndarray, outcomes: SurvivalData, seed: int) -> Callable[[np.ndarray], np.ndarray]:
        ...


@dataclass
class Replicate:
    index: int
    bootstrap_performance: float = float("nan")
    test_performance: float = float("nan")
    sample_indices: List[int] = field(default_factory=list)
    redraws: int = 0
    evaluation_digest: str = ""
    excluded: bool = False
    error: str = ""

    @property
    def optimism(self) -> float:
        return self.bootstrap_performance - self.test_performance


@dataclass
class ValidationReport:
    apparent_c: float
    replicates: List[Replicate]
    mean_optimism: float
    corrected_c: float
    ci_95: tuple
    B: int
    ci_method: str = CI_METHOD
    fast_validation: bool = False
    notes: List[str] = field(default_factory=list)
    hyperparameters: Optional[Dict[str, float]] = None
    data_digest: str = ""

    @property
    def included(self) -> List[Replicate]:
        return [r for r in self.replicates if not r.excluded]

    def corrected_values(self) -> np.ndarray:
        """Per-replicate optimism-corrected concordance ``apparent_c - optimism_b``."""
        return np.array([self.apparent_c - r.optimism for r in self.included])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci_95"] = list(self.ci_95)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ValidationReport":
        d = dict(d)
        d["replicates"] = [Replicate(**r) for r in d["replicates"]]
        d["ci_95"] = tuple(d["ci_95"])
        return cls(**d)

    def summary(self) -> str:
        lo, hi = self.ci_95
        lines = [
            f"apparent C        {self.apparent_c:.4f}",
            f"mean optimism     {self.mean_optimism:.4f}  (B={self.B}, {len(self.included)} used)",
            f"corrected C       {self.corrected_c:.4f}  (95% CI {lo:.4f}-{hi:.4f})",
        ]
        if self.fast_validation:
            lines.append("fast validation: replicates reuse the full-sample hyperparameters")
        return "\n".join(lines)


def dataset_digest(features, outcomes: SurvivalData) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(features, dtype=float).tobytes())
    h.update(outcomes.time.tobytes())
    h.update(outcomes.event.tobytes())
    return h.hexdigest()


def _draw_resample(outcomes: SurvivalData, seed: int, b: int, max_redraws: int):
    n = len(outcomes)
    rng = stream(seed, "bootstrap", b)
    for attempt in range(max_redraws + 1):
        idx = rng.integers(0, n, size=n)
        if outcomes.event[idx].any():
            if attempt:
                warnings.warn(f"replicate {b}: redrew {attempt} zero-event resamples", RuntimeWarning, stacklevel=3)
            return idx, attempt
    raise NumericalError(f"replicate {b}: no resample with an event in {max_redraws} redraws")


def bootstrap_optimism(trainer: Trainer, features, outcomes: SurvivalData, B: int = 50, seed: int = 0, *,
                       fast_validation: bool = False, jobs: int = 1, max_redraws: int = 100,
                       max_excluded_fraction: float = 0.1) -> ValidationReport:
    """Optimism-corrected concordance by bootstrap internal validation.

    Parameters
    ----------
    trainer : Trainer
        Called as ``trainer(features, outcomes, seed)``; must return a
        function mapping a feature matrix to risk scores.
    B : int
        Number of bootstrap replicates.
    fast_validation : bool
        If the trainer supports ``with_fixed_hyperparameters``, replicates
        reuse the hyperparameters chosen on the full sample instead of
        repeating the search. The report is labelled accordingly.

    Raises
    ------
    NumericalError
        If more than ``max_excluded_fraction`` of the replicates fail.
    """
    X = np.asarray(features, dtype=float)
    n = X.shape[0]
    if n < 2 or n != len(outcomes):
        raise MalformedInputError(f"need n >= 2 matching outcomes, got {n} rows and {len(outcomes)} outcomes")
    if B < 1:
        raise MalformedInputError(f"B must be >= 1, got {B}")
    X.setflags(write=False)
    digest = dataset_digest(X, outcomes)

    full_scorer = trainer(X, outcomes, derive_seed(seed, "apparent"))
    apparent = concordance_index(full_scorer(X), outcomes)
    hyper = getattr(full_scorer, "hyperparameters", None)

    notes = []
    replicate_trainer = trainer
    if fast_validation and hasattr(trainer, "with_fixed_hyperparameters"):
        replicate_trainer = trainer.with_fixed_hyperparameters(full_scorer)
        notes.append("fast validation: hyperparameter search is not repeated inside replicates (deviates from TRIPOD)")

    def run(b: int) -> Replicate:
        rep = Replicate(b)
        try:
            idx, rep.redraws = _draw_resample(outcomes, seed, b, max_redraws)
            rep.sample_indices = idx.tolist()
            Xb, ob = X[idx], outcomes[idx]
            scorer = replicate_trainer(Xb, ob, derive_seed(seed, "replicate", b))
            rep.bootstrap_performance = concordance_index(scorer(Xb), ob)
            rep.test_performance = concordance_index(scorer(X), outcomes)
            rep.evaluation_digest = dataset_digest(X, outcomes)
        except Exception as exc:  # a failed replicate is recorded, not fatal
            rep.excluded = True
            rep.error = f"{type(exc).__name__}: {exc}"
            log.warning("replicate %d excluded: %s", b, rep.error)
        return rep

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            replicates = list(pool.map(run, range(B)))
    else:
        replicates = [run(b) for b in range(B)]

    used = [r for r in replicates if not r.excluded]
    if len(replicates) - len(used) > max_excluded_fraction * B:
        raise NumericalError(f"{B - len(used)} of {B} bootstrap replicates failed")
    if not used:
        raise NumericalError("every bootstrap replicate failed")
    mean_optimism = math.fsum(r.optimism for r in used) / len(used)
    corrected = apparent - mean_optimism
    if len(used) > 1:
        sd = float(np.std([apparent - r.optimism for r in used], ddof=1))
        ci = (corrected - Z_95 * sd, corrected + Z_95 * sd)
    else:
        ci = (float("nan"), float("nan"))
    return ValidationReport(apparent, replicates, mean_optimism, corrected, ci, B,
                            fast_validation=bool(notes), notes=notes, hyperparameters=hyper, data_digest=digest)


@dataclass
class NetworkTrainer:
    """Trains the survival autoencoder, optionally tuning it first.

    With ``space`` and ``swarm`` set, every call runs the particle swarm
    search on the data it is given and then trains a final model with the
    best hyperparameters; otherwise ``hyperparameters`` are used as is.
    """

    hyperparameters: Dict[str, float] = field(default_factory=dict)
    train_config: TrainConfig = field(default_factory=TrainConfig)
    space: Optional[SearchSpace] = None
    swarm: Optional[SwarmConfig] = None
    jobs: int = 1

    def __call__(self, features, outcomes: SurvivalData, seed: int):
        params = dict(self.hyperparameters)
        if self.space is not None and self.swarm is not None:
            swarm = replace(self.swarm, seed=derive_seed(seed, "tune"))
            result = tune_network(features, outcomes, self.space, swarm, train_config=self.train_config, jobs=self.jobs)
            params.update(result.best_position)
        return fit_network(params, features, outcomes, derive_seed(seed, "final"), self.train_config)

    def with_fixed_hyperparameters(self, scorer) -> "NetworkTrainer":
        return NetworkTrainer(dict(scorer.hyperparameters), self.train_config, None, None, self.jobs)


@dataclass
class CoxScorer:
    """Linear Cox risk score on covariates standardised with training statistics."""

    coefficients: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    penalty: float
    converged: bool

    def __call__(self, covariates) -> np.ndarray:
        Z = (np.atleast_2d(np.asarray(covariates, dtype=float)) - self.mean) / self.scale
        return Z @ self.coefficients

    @property
    def hyperparameters(self) -> Dict[str, float]:
        return {"penalty": self.penalty}


def _standardise(Z):
    mean = Z.mean(axis=0)
    scale = Z.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return (Z - mean) / scale, mean, scale


def _cv_partial_likelihood(Zs, outcomes, folds, penalty) -> float:
    """Cross-validated log partial likelihood (full-data minus training-fold contribution)."""
    n = Zs.shape[0]
    total = 0.0
    for held in folds:
        train_idx = np.setdiff1d(np.arange(n), held)
        beta = fit_cox_l2(Zs[train_idx], outcomes[train_idx], penalty).coefficients
        full, _ = cox_loss_and_gradient(Zs @ beta, outcomes.time, outcomes.event)
        part, _ = cox_loss_and_gradient(Zs[train_idx] @ beta, outcomes.time[train_idx], outcomes.event[train_idx])
        total += part - full
    return total


def benchmark_conventional(covariates, outcomes: SurvivalData, seed: int = 0, *,
                           penalties: Sequence[float] = tuple(np.logspace(-3, 3, 13)), folds: int = 5) -> CoxScorer:
    """Ridge Cox model on conventional covariates with cross-validated penalty.

    Covariates are standardised, the penalty is chosen to maximise the
    cross-validated partial likelihood over ``penalties`` (ties go to the
    stronger penalty), and the model is refitted on all subjects.
    """
    Z = np.asarray(covariates, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.ndim != 2 or Z.shape[1] < 1:
        raise MalformedInputError("covariates must be an (n, p) matrix with p >= 1")
    Zs, mean, scale = _standardise(Z)
    k = min(folds, outcomes.n_events, len(outcomes))
    if k >= 2 and len(penalties) > 1:
        partition = make_folds(outcomes, k, derive_seed(seed, "ridge-cv"))
        grid = sorted(float(p) for p in penalties)[::-1]
        scores = [_cv_partial_likelihood(Zs, outcomes, partition, p) for p in grid]
        penalty = grid[int(np.argmax(scores))]
    else:
        penalty = float(max(penalties))
    fit = fit_cox_l2(Zs, outcomes, penalty)
    return CoxScorer(fit.coefficients, mean, scale, penalty, fit.converged)


def stratify_by_median_risk(risks, outcomes: SurvivalData):
    """Split into (low, high) groups; risks strictly above the median are high.

    Raises
    ------
    StratificationError
        If no subject lies strictly above the median (e.g. all risks equal).
    """
    risks = np.asarray(risks, dtype=float).reshape(-1)
    if risks.size != len(outcomes):
        raise MalformedInputError(f"{risks.size} risks for {len(outcomes)} outcomes")
    if risks.size < 2:
        raise StratificationError("need at least two subjects to stratify")
    high = risks > np.median(risks)
    if not high.any() or high.all():
        raise StratificationError("risk scores admit no median split")
    return outcomes[~high], outcomes[high]


@dataclass(frozen=True)
class ComparisonResult:
    mean_difference: float
    ci_95: tuple
    p_value: float
    n_replicates: int
    exact: bool
    method: str = "paired sign-flip permutation test on per-replicate corrected concordance"


def _sign_flip_p(d: np.ndarray, n_permutations: int, exact: bool, seed: int) -> float:
    B = d.size
    observed = abs(d.mean())
    tol = 1e-12 * max(1.0, observed)
    if exact:
        bits = (np.arange(2 ** B)[:, None] >> np.arange(B)) & 1
        signs = 1.0 - 2.0 * bits
        return float(np.mean(np.abs(signs @ d) / B >= observed - tol))
    rng = stream(seed, "sign-flip")
    hits = 0
    done = 0
    while done < n_permutations:
        m = min(4096, n_permutations - done)
        signs = rng.choice((-1.0, 1.0), size=(m, B))
        hits += int(np.sum(np.abs(signs @ d) / B >= observed - tol))
        done += m
    return (hits + 1) / (n_permutations + 1)


def compare_models(report_a: ValidationReport, report_b: ValidationReport, *, n_permutations: int = 10_000,
                   seed: int = 0, exact: Optional[bool] = None) -> ComparisonResult:
    """Paired test of per-replicate corrected concordance, ``a - b``.

    Replicates are paired by index; both reports should come from the same
    resamples (same seed and data size). The p-value enumerates all sign
    flips when ``2**B <= n_permutations`` (or ``exact=True``), otherwise it
    uses ``n_permutations`` random flips.
    """
    if report_a.B != report_b.B or len(report_a.replicates) != len(report_b.replicates):
        raise MalformedInputError(f"replicate counts differ: {report_a.B} vs {report_b.B}")
    pairs = [(ra, rb) for ra, rb in zip(report_a.replicates, report_b.replicates)
             if not (ra.excluded or rb.excluded)]
    if any(ra.sample_indices != rb.sample_indices for ra, rb in pairs):
        warnings.warn("reports were not built on identical resamples; pairing is approximate", RuntimeWarning,
                      stacklevel=2)
    if not pairs:
        raise MalformedInputError("no replicate is usable in both reports")
    d = np.array([(report_a.apparent_c - ra.optimism) - (report_b.apparent_c - rb.optimism) for ra, rb in pairs])
    B = d.size
    if exact is None:
        exact = 2 ** B <= n_permutations
    p = _sign_flip_p(d, n_permutations, exact, seed)
    mean = float(d.mean())
    half = Z_95 * float(np.std(d, ddof=1)) / math.sqrt(B) if B > 1 else float("nan")
    return ComparisonResult(mean, (mean - half, mean + half), p, B, bool(exact))


# ---------------------------------------------------------------------------
# output files


def write_report_json(path, report: ValidationReport) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1, allow_nan=True)
        fh.write("\n")


def read_report_json(path) -> ValidationReport:
    return ValidationReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_km_csv(path, curves: Dict[str, KaplanMeier]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["group", "time", "n_at_risk", "n_events", "n_censored", "survival", "ci_lower", "ci_upper"])
        for group, km in curves.items():
            writer.writerow([group, repr(0.0), int(km.n_at_risk[0]) if km.times.size else 0, 0, 0,
                             repr(1.0), repr(1.0), repr(1.0)])
            for k in range(km.times.size):
                writer.writerow([group, repr(float(km.times[k])), int(km.n_at_risk[k]), int(km.n_events[k]),
                                 int(km.n_censored[k]), repr(float(km.survival[k])),
                                 repr(float(km.ci_lower[k])), repr(float(km.ci_upper[k]))])


def write_logrank_csv(path, result: LogRankResult, n_low: int, n_high: int) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["statistic", "df", "p_value", "n_low", "n_high", "observed_low", "expected_low"])
        writer.writerow([repr(result.statistic), result.df, repr(result.p_value), n_low, n_high,
                         repr(result.observed_a), repr(result.expected_a)])
