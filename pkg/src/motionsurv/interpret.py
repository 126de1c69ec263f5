"""Model interpretation: 2-D spectral embedding of latent codes and vertex saliency."""

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import linalg
from scipy.sparse.csgraph import connected_components

from .errors import MalformedInputError, NumericalError
from .motion import MotionSample, build_feature_matrix, mean_displacement_per_vertex
from .network import NetworkModel, predict_risk
from .survival import SurvivalData

__all__ = [
    "Embedding2D",
    "SaliencyMap",
    "knn_graph",
    "normalized_laplacian",
    "laplacian_eigenmaps",
    "univariate_slopes",
    "saliency_from_risks",
    "saliency_map",
    "write_embedding_csv",
    "write_saliency_csv",
]

DEGENERACY_TOL = 1e-10
LOG_EPS = 1e-12


@dataclass(frozen=True)
class Embedding2D:
    """Two-dimensional spectral coordinates, one row per subject.

    Attributes
    ----------
    coords : ndarray, shape (n, 2)
    eigenvalues : ndarray, shape (3,)
        Three smallest eigenvalues of the normalised Laplacian.
    degenerate : bool
        True when the 2nd and 3rd eigenvalues coincide, in which case any
        rotation of ``coords`` is an equally valid answer.
    n_components : int
        Connected components of the neighbour graph.
    """

    coords: np.ndarray
    neighbor_count: int
    eigenvalues: np.ndarray
    degenerate: bool
    n_components: int = 1


@dataclass(frozen=True)
class SaliencyMap:
    abs_coefficient: np.ndarray
    coefficient: np.ndarray
    zero_variance: np.ndarray

    @property
    def log_display(self) -> np.ndarray:
        return np.log(LOG_EPS + self.abs_coefficient)

    def __len__(self):
        return self.abs_coefficient.size


def knn_graph(points, k: int) -> np.ndarray:
    """Binary k-nearest-neighbour adjacency, symmetrised by union.

    Ties in distance are broken by index, so the graph is deterministic.
    """
    X = np.asarray(points, dtype=float)
    n = X.shape[0]
    sq = np.sum(X * X, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.fill_diagonal(d2, np.inf)
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
    A = np.zeros((n, n))
    A[np.repeat(np.arange(n), k), nearest.ravel()] = 1.0
    return np.maximum(A, A.T)


def normalized_laplacian(adjacency):
    """``I - D^-1/2 A D^-1/2`` and the degree vector."""
    A = np.asarray(adjacency, dtype=float)
    deg = A.sum(axis=1)
    if np.any(deg == 0):
        raise NumericalError("graph has an isolated vertex")
    s = 1.0 / np.sqrt(deg)
    L = np.eye(A.shape[0]) - s[:, None] * A * s[None, :]
    return 0.5 * (L + L.T), deg


def _fix_sign(v: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    nz = np.flatnonzero(np.abs(v) > tol * max(1.0, np.abs(v).max()))
    if nz.size and v[nz[0]] < 0:
        return -v
    return v


def laplacian_eigenmaps(codes, k: int = 10, *, strict: bool = False) -> Embedding2D:
    """Project points to 2-D with Laplacian eigenmaps.

    Eigenvectors ``u`` of the symmetric normalised Laplacian are mapped to
    ``D^-1/2 u``, which makes the bottom eigenvector constant and returns
    the solutions of ``L f = lambda D f``. The coordinates are the vectors
    for the 2nd and 3rd smallest eigenvalues, each scaled to unit
    ``D``-norm and signed so that its first nonzero entry is positive. On a
    disconnected graph the extra zero eigenvalues come first, so the leading
    coordinates are constant on each component.

    Parameters
    ----------
    codes : array_like, shape (n, d)
    k : int
        Neighbours per point before symmetrisation; ``1 <= k < n``.
    strict : bool
        Raise instead of warning when the graph is disconnected.
    """
    X = np.asarray(codes, dtype=float)
    if X.ndim != 2 or not np.all(np.isfinite(X)):
        raise MalformedInputError("latent codes must be a finite (n, d) matrix")
    n = X.shape[0]
    if n < 3:
        raise MalformedInputError(f"need at least 3 points, got {n}")
    if not 1 <= k < n:
        raise MalformedInputError(f"k must satisfy 1 <= k < n={n}, got {k}")
    A = knn_graph(X, k)
    n_comp, _ = connected_components(A, directed=False)
    if n_comp > 1:
        msg = f"neighbour graph has {n_comp} connected components; leading coordinates index the components"
        if strict:
            raise NumericalError(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    L, deg = normalized_laplacian(A)
    # The trivial eigenvector sqrt(deg) is known exactly. Shifting it above the
    # spectrum (eigenvalues lie in [0, 2]) leaves the next two eigenpairs as the
    # smallest ones, and on a disconnected graph picks null vectors orthogonal to it.
    u0 = np.sqrt(deg) / np.linalg.norm(np.sqrt(deg))
    vals, vecs = linalg.eigh(L + 3.0 * np.outer(u0, u0), subset_by_index=[0, 1])
    vals = np.maximum(np.concatenate(([u0 @ L @ u0], vals)), 0.0)
    f = vecs / np.sqrt(deg)[:, None]
    coords = np.column_stack([_fix_sign(f[:, j]) for j in (0, 1)])
    degenerate = bool(abs(vals[2] - vals[1]) <= DEGENERACY_TOL)
    if degenerate:
        warnings.warn("2nd and 3rd eigenvalues coincide; the 2-D basis is not unique", RuntimeWarning, stacklevel=2)
    return Embedding2D(coords, k, vals, degenerate, int(n_comp))


def univariate_slopes(y, X):
    """Least-squares slope of ``y`` on each column of ``X`` separately (with intercept).

    Returns the slopes and a mask of zero-variance columns, whose slope is
    reported as 0.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    Xc = X - X.mean(axis=0)
    yc = y - y.mean()
    sxx = np.einsum("ij,ij->j", Xc, Xc)
    sxy = Xc.T @ yc
    scale = np.maximum(np.abs(X).max(axis=0), 1.0)
    flat = sxx <= (1e-12 * scale) ** 2 * X.shape[0]
    slope = np.where(flat, 0.0, sxy / np.where(flat, 1.0, sxx))
    return slope, flat


def saliency_from_risks(risks, vertex_values) -> SaliencyMap:
    """Regress ``risks`` (n,) on each column of ``vertex_values`` (n, V)."""
    risks = np.asarray(risks, dtype=float).reshape(-1)
    M = np.asarray(vertex_values, dtype=float)
    if M.ndim != 2 or M.shape[0] != risks.size:
        raise MalformedInputError(f"vertex values {M.shape} do not match {risks.size} risks")
    if risks.size < 3:
        raise MalformedInputError(f"need at least 3 subjects, got {risks.size}")
    slope, flat = univariate_slopes(risks, M)
    if flat.any():
        warnings.warn(f"{int(flat.sum())} vertices have no variance; their coefficients are set to 0",
                      RuntimeWarning, stacklevel=2)
    return SaliencyMap(np.abs(slope), slope, flat)


def saliency_map(model: Union[NetworkModel, Callable], samples: Sequence[MotionSample]) -> SaliencyMap:
    """Per-vertex absolute slope of predicted risk on mean displacement magnitude."""
    X = build_feature_matrix(samples)
    risks = predict_risk(model, X) if isinstance(model, NetworkModel) else np.asarray(model(X), dtype=float)
    M = np.stack([mean_displacement_per_vertex(s) for s in samples])
    return saliency_from_risks(risks, M)


def write_embedding_csv(path, subject_ids: Sequence[str], embedding: Embedding2D,
                        outcomes: Optional[SurvivalData] = None) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject_id", "dim1", "dim2", "survival_time", "event"])
        for i, sid in enumerate(subject_ids):
            t = repr(float(outcomes.time[i])) if outcomes is not None else ""
            e = int(outcomes.event[i]) if outcomes is not None else ""
            writer.writerow([sid, repr(float(embedding.coords[i, 0])), repr(float(embedding.coords[i, 1])), t, e])


def write_saliency_csv(path, saliency: SaliencyMap, log_display: bool = True) -> None:
    shown = saliency.log_display
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["vertex_index", "abs_coefficient", "log_display_value", "zero_variance"])
        for v in range(len(saliency)):
            writer.writerow([v + 1, repr(float(saliency.abs_coefficient[v])),
                             repr(float(shown[v])) if log_display else "", int(saliency.zero_variance[v])])
