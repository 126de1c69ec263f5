"""Survival-analysis primitives for right-censored outcomes.

Covers the Cox partial likelihood (Breslow ties) and its gradient, an
L2-penalised Cox fit used as the conventional benchmark, Harrell's
concordance index, the Kaplan-Meier estimator and the two-group log-rank
test. Everything here is a pure function of its inputs.
"""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import MalformedInputError, UndefinedResultError

__all__ = [
    "SurvivalRecord",
    "SurvivalData",
    "risk_set",
    "cox_neg_log_partial_likelihood",
    "cox_gradient_wrt_risks",
    "cox_loss_and_gradient",
    "CoxFit",
    "cox_l2_objective",
    "fit_cox_l2",
    "concordance_index",
    "KaplanMeier",
    "kaplan_meier",
    "LogRankResult",
    "logrank_test",
    "read_survival_csv",
    "write_survival_csv",
]

Z_95 = 1.959963984540054


@dataclass(frozen=True)
class SurvivalRecord:
    subject_id: str
    time: float
    event: int

    def __post_init__(self):
        if not math.isfinite(self.time) or self.time < 0:
            raise MalformedInputError(f"{self.subject_id}: time must be finite and >= 0, got {self.time}")
        if self.event not in (0, 1):
            raise MalformedInputError(f"{self.subject_id}: event must be 0 or 1, got {self.event}")


@dataclass(frozen=True, eq=False)
class SurvivalData:
    """Column-oriented collection of right-censored outcomes.

    Parameters
    ----------
    time : array_like
        Follow-up time in days, finite and nonnegative.
    event : array_like
        1 if death was observed, 0 if censored.
    subject_id : sequence of str, optional
        Defaults to ``"0", "1", ...``.
    """

    time: np.ndarray
    event: np.ndarray
    subject_id: tuple = field(default=())

    def __post_init__(self):
        time = np.asarray(self.time, dtype=float).reshape(-1)
        event = np.asarray(self.event)
        if event.shape != time.shape:
            raise MalformedInputError(f"time has {time.size} entries but event has {event.size}")
        if not np.all(np.isfinite(time)) or np.any(time < 0):
            raise MalformedInputError("survival times must be finite and nonnegative")
        if not np.all((event == 0) | (event == 1)):
            raise MalformedInputError("event indicators must be 0 or 1")
        ids = tuple(str(s) for s in self.subject_id) or tuple(str(i) for i in range(time.size))
        if len(ids) != time.size:
            raise MalformedInputError(f"{len(ids)} subject ids for {time.size} outcomes")
        time.setflags(write=False)
        event = event.astype(np.int8)
        event.setflags(write=False)
        object.__setattr__(self, "time", time)
        object.__setattr__(self, "event", event)
        object.__setattr__(self, "subject_id", ids)

    @classmethod
    def from_records(cls, records: Sequence[SurvivalRecord]) -> "SurvivalData":
        return cls(
            time=[r.time for r in records],
            event=[r.event for r in records],
            subject_id=[r.subject_id for r in records],
        )

    def records(self) -> list:
        return [SurvivalRecord(s, float(t), int(e)) for s, t, e in zip(self.subject_id, self.time, self.event)]

    def __len__(self):
        return self.time.size

    def __getitem__(self, idx) -> "SurvivalData":
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        ids = tuple(self.subject_id[i] for i in idx)
        return SurvivalData(self.time[idx], self.event[idx], ids)

    @property
    def n_events(self) -> int:
        return int(self.event.sum())

    @property
    def event_fraction(self) -> float:
        return self.n_events / len(self)


def _check_lengths(risks, outcomes: SurvivalData) -> np.ndarray:
    risks = np.asarray(risks, dtype=float).reshape(-1)
    if risks.size != len(outcomes):
        raise MalformedInputError(f"{risks.size} risk scores for {len(outcomes)} outcomes")
    if risks.size == 0:
        raise MalformedInputError("at least one subject is required")
    return risks


def risk_set(outcomes: SurvivalData, i: int) -> np.ndarray:
    """Indices of subjects still under observation at subject ``i``'s time.

    Uses ``t_j >= t_i`` so that ``i`` belongs to its own risk set.
    """
    return np.flatnonzero(outcomes.time >= outcomes.time[i])


def cox_loss_and_gradient(risks, time, event):
    """Negative log partial likelihood and its gradient in the risk scores.

    Arrays are taken raw (no validation) because the network calls this in
    its inner loop. Ties use the Breslow convention; all log-sum-exp
    accumulations are done with ``logaddexp`` so large risk spreads stay
    finite.
    """
    order = np.argsort(time, kind="stable")
    ts = time[order]
    es = risks[order]
    dead = event[order].astype(bool)
    if not dead.any():
        return 0.0, np.zeros_like(risks, dtype=float)

    first = np.searchsorted(ts, ts, side="left")
    last = np.searchsorted(ts, ts, side="right") - 1
    # log sum_{j: t_j >= t_k} exp(eta_j), read at the start of each tie block
    log_tail = np.logaddexp.accumulate(es[::-1])[::-1]
    log_denom = log_tail[first]
    loss = -float(np.sum(es[dead] - log_denom[dead]))

    # subject j receives exp(eta_j) / D_i from every event i with t_i <= t_j
    neg_log_denom = np.where(dead, -log_denom, -np.inf)
    log_acc = np.logaddexp.accumulate(neg_log_denom)
    grad_sorted = np.exp(es + log_acc[last]) - dead
    grad = np.empty_like(grad_sorted)
    grad[order] = grad_sorted
    return loss, grad


def cox_neg_log_partial_likelihood(risks, outcomes: SurvivalData) -> float:
    """Negative Cox log partial likelihood of ``risks`` (Breslow ties).

    Returns 0 when every subject is censored.
    """
    risks = _check_lengths(risks, outcomes)
    return cox_loss_and_gradient(risks, outcomes.time, outcomes.event)[0]


def cox_gradient_wrt_risks(risks, outcomes: SurvivalData) -> np.ndarray:
    risks = _check_lengths(risks, outcomes)
    return cox_loss_and_gradient(risks, outcomes.time, outcomes.event)[1]


@dataclass
class CoxFit:
    coefficients: np.ndarray
    ridge_penalty: float
    converged: bool
    n_iterations: int
    objective: float = float("nan")
    objective_trace: list = field(default_factory=list)

    def predict(self, covariates) -> np.ndarray:
        return np.asarray(covariates, dtype=float) @ self.coefficients


def cox_l2_objective(beta, covariates, outcomes: SurvivalData, penalty: float) -> float:
    """Penalised log partial likelihood ``loglik(beta) - penalty/2 * |beta|^2`` (to be maximised)."""
    beta = np.asarray(beta, dtype=float)
    eta = np.asarray(covariates, dtype=float) @ beta
    loss, _ = cox_loss_and_gradient(eta, outcomes.time, outcomes.event)
    return -loss - 0.5 * penalty * float(beta @ beta)


def _cox_newton_terms(beta, Z, time, event, penalty):
    """Objective, gradient and Hessian of the penalised log partial likelihood."""
    n, p = Z.shape
    eta = Z @ beta
    loss, g_eta = cox_loss_and_gradient(eta, time, event)
    objective = -loss - 0.5 * penalty * float(beta @ beta)
    grad = -Z.T @ g_eta - penalty * beta

    hess = -penalty * np.eye(p)
    dead = event.astype(bool)
    if dead.any():
        order = np.argsort(time, kind="stable")
        ts, Zs, ds = time[order], Z[order], dead[order]
        w = np.exp(eta[order] - eta.max())
        s0 = np.cumsum(w[::-1])[::-1]
        s1 = np.cumsum((w[:, None] * Zs)[::-1], axis=0)[::-1]
        s2 = np.cumsum((w[:, None, None] * Zs[:, :, None] * Zs[:, None, :])[::-1], axis=0)[::-1]
        first = np.searchsorted(ts, ts, side="left")[ds]
        zbar = s1[first] / s0[first, None]
        hess -= np.sum(s2[first] / s0[first, None, None], axis=0) - zbar.T @ zbar
    return objective, grad, hess


def fit_cox_l2(covariates, outcomes: SurvivalData, penalty: float, *, tol: float = 1e-8, max_iter: int = 100) -> CoxFit:
    """Fit an L2-penalised Cox model by Newton's method with step halving.

    The iteration stops when the sup-norm of the gradient drops below
    ``tol`` or after ``max_iter`` Newton steps; in the latter case the fit
    is returned with ``converged=False`` rather than raising.

    Parameters
    ----------
    covariates : array_like, shape (n, p)
    outcomes : SurvivalData
    penalty : float
        Ridge strength ``lambda >= 0``.
    """
    Z = np.asarray(covariates, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.ndim != 2 or Z.shape[1] < 1:
        raise MalformedInputError("covariates must be an (n, p) matrix with p >= 1")
    if Z.shape[0] != len(outcomes):
        raise MalformedInputError(f"{Z.shape[0]} covariate rows for {len(outcomes)} outcomes")
    if not np.all(np.isfinite(Z)):
        raise MalformedInputError("covariates contain non-finite values")
    if not (penalty >= 0 and math.isfinite(penalty)):
        raise MalformedInputError(f"penalty must be finite and >= 0, got {penalty}")

    time, event = outcomes.time, outcomes.event
    beta = np.zeros(Z.shape[1])
    obj, grad, hess = _cox_newton_terms(beta, Z, time, event, penalty)
    trace = [obj]
    converged = bool(np.max(np.abs(grad)) < tol)
    it = 0
    while not converged and it < max_iter:
        it += 1
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(-hess, grad, rcond=None)[0]
        scale = 1.0
        # near the optimum the gain is below rounding error; do not halve on noise
        slack = 1e-12 * (1.0 + abs(obj))
        for _ in range(60):
            candidate = beta + scale * step
            new_obj = cox_l2_objective(candidate, Z, outcomes, penalty)
            if np.isfinite(new_obj) and new_obj >= obj - slack:
                break
            scale *= 0.5
        else:
            break
        beta = candidate
        obj, grad, hess = _cox_newton_terms(beta, Z, time, event, penalty)
        trace.append(obj)
        converged = bool(np.max(np.abs(grad)) < tol)
    return CoxFit(beta, float(penalty), converged and bool(np.all(np.isfinite(beta))), it, obj, trace)


def concordance_index(risks, outcomes: SurvivalData, *, ties: str = "harrell") -> float:
    """Harrell's concordance index.

    A pair ``(i, j)`` is informative when ``i`` had an observed event and
    ``t_i < t_j`` strictly. It is concordant when ``risk_i > risk_j``.

    Parameters
    ----------
    ties : {"harrell", "strict"}
        How tied risk scores among informative pairs are scored: 0.5 each
        under ``"harrell"``, 0 under ``"strict"``.

    Raises
    ------
    UndefinedResultError
        If there are no informative pairs.
    """
    if ties not in ("harrell", "strict"):
        raise ValueError(f"unknown tie policy {ties!r}")
    risks = _check_lengths(risks, outcomes)
    t = outcomes.time
    informative = outcomes.event.astype(bool)[:, None] & (t[:, None] < t[None, :])
    n_pairs = int(informative.sum())
    if n_pairs == 0:
        raise UndefinedResultError("no informative pairs: concordance index is undefined")
    concordant = int(np.sum(informative & (risks[:, None] > risks[None, :])))
    if ties == "harrell":
        tied = int(np.sum(informative & (risks[:, None] == risks[None, :])))
        return (concordant + 0.5 * tied) / n_pairs
    return concordant / n_pairs


@dataclass
class KaplanMeier:
    """Product-limit estimate with log-log Greenwood 95% bands.

    Arrays are indexed by the distinct observed times (events and
    censorings) in increasing order; ``survival[k]`` is the estimate on
    ``[times[k], times[k+1])``.
    """

    times: np.ndarray
    n_at_risk: np.ndarray
    n_events: np.ndarray
    n_censored: np.ndarray
    survival: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray

    def __call__(self, t):
        """Evaluate the right-continuous step function at time(s) ``t >= 0``."""
        t = np.asarray(t, dtype=float)
        k = np.searchsorted(self.times, t, side="right") - 1
        return np.where(k >= 0, self.survival[np.maximum(k, 0)], 1.0)

    def confidence_band(self, t):
        t = np.asarray(t, dtype=float)
        k = np.searchsorted(self.times, t, side="right") - 1
        safe = np.maximum(k, 0)
        lo = np.where(k >= 0, self.ci_lower[safe], 1.0)
        hi = np.where(k >= 0, self.ci_upper[safe], 1.0)
        return lo, hi


def kaplan_meier(outcomes: SurvivalData) -> KaplanMeier:
    if len(outcomes) < 1:
        raise MalformedInputError("Kaplan-Meier needs at least one subject")
    t, e = outcomes.time, outcomes.event
    times, inverse = np.unique(t, return_inverse=True)
    n_events = np.bincount(inverse, weights=e, minlength=times.size).astype(int)
    n_total = np.bincount(inverse, minlength=times.size)
    n_at_risk = len(outcomes) - np.concatenate(([0], np.cumsum(n_total)[:-1]))
    n_censored = n_total - n_events

    survival = np.cumprod(1.0 - n_events / n_at_risk)
    with np.errstate(divide="ignore", invalid="ignore"):
        greenwood = np.cumsum(n_events / (n_at_risk * (n_at_risk - n_events)))
        log_s = np.log(survival)
        se = np.sqrt(greenwood) / np.abs(log_s)
        lower = survival ** np.exp(Z_95 * se)
        upper = survival ** np.exp(-Z_95 * se)
    one = survival == 1.0
    zero = survival == 0.0
    lower = np.where(one, 1.0, np.where(zero, 0.0, lower))
    upper = np.where(one, 1.0, np.where(zero, 0.0, upper))
    return KaplanMeier(times, n_at_risk, n_events, n_censored, survival, lower, upper)


@dataclass(frozen=True)
class LogRankResult:
    statistic: float
    p_value: float
    df: int = 1
    observed_a: float = 0.0
    expected_a: float = 0.0


def logrank_test(group_a: SurvivalData, group_b: SurvivalData) -> LogRankResult:
    """Two-group log-rank test with a chi-square(1) reference distribution."""
    if len(group_a) == 0 or len(group_b) == 0:
        raise MalformedInputError("both groups must be nonempty")
    time = np.concatenate([group_a.time, group_b.time])
    event = np.concatenate([group_a.event, group_b.event]).astype(bool)
    in_a = np.concatenate([np.ones(len(group_a), bool), np.zeros(len(group_b), bool)])
    if not event.any():
        raise UndefinedResultError("log-rank test is undefined with zero events")

    event_times = np.unique(time[event])
    at_risk = time[None, :] >= event_times[:, None]
    dies = event[None, :] & (time[None, :] == event_times[:, None])
    n = at_risk.sum(axis=1).astype(float)
    n_a = (at_risk & in_a).sum(axis=1).astype(float)
    d = dies.sum(axis=1).astype(float)
    d_a = (dies & in_a).sum(axis=1).astype(float)

    expected_a = float(np.sum(d * n_a / n))
    observed_a = float(d_a.sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(n > 1, n_a * (n - n_a) * d * (n - d) / (n * n * (n - 1)), 0.0)
    variance = float(v.sum())
    if variance <= 0:
        statistic = 0.0
    else:
        statistic = (observed_a - expected_a) ** 2 / variance
    return LogRankResult(statistic, float(stats.chi2.sf(statistic, 1)), 1, observed_a, expected_a)


def read_survival_csv(path) -> SurvivalData:
    """Read ``subject_id,time_days,event`` rows."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"subject_id", "time_days", "event"} - set(reader.fieldnames or ())
        if missing:
            raise MalformedInputError(f"{path}: missing columns {sorted(missing)}")
        ids, times, events = [], [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                times.append(float(row["time_days"]))
                events.append(int(row["event"]))
            except ValueError as exc:
                raise MalformedInputError(f"{path}:{lineno}: {exc}") from None
            ids.append(row["subject_id"])
    return SurvivalData(times, events, ids)


def write_survival_csv(path, outcomes: SurvivalData) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject_id", "time_days", "event"])
        for i in range(len(outcomes)):
            writer.writerow([outcomes.subject_id[i], repr(float(outcomes.time[i])), int(outcomes.event[i])])
