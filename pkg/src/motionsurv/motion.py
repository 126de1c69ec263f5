"""Mesh motion samples, displacement features and synthetic cohorts.

A :class:`MotionSample` holds one subject's vertex trajectories as an
array of shape ``(V, T, 3)``. The displacement feature vector is flattened
with the vertex index outermost, then the frame (2..T), then the x/y/z
coordinate, i.e. ``coords[:, 1:, :] - coords[:, :1, :]`` in C order. The
same order is used by the binary motion container.
"""

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence

import numpy as np
from scipy import integrate, special

from .errors import ConfigError, MalformedInputError
from .seeding import stream
from .survival import SurvivalData

__all__ = [
    "MotionSample",
    "feature_length",
    "build_displacement_vector",
    "build_feature_matrix",
    "mean_displacement_per_vertex",
    "SyntheticCohortConfig",
    "SyntheticCohort",
    "generate_synthetic_cohort",
    "planted_concordance",
    "write_motion_csv",
    "read_motion_csv",
    "write_motion_binary",
    "read_motion_binary",
    "read_motion",
    "write_motion",
    "write_covariates_csv",
    "read_covariates_csv",
    "VOLUMETRIC_COLUMNS",
]

MOTION_MAGIC = b"MESHMOTION\x00BIN\x00\x01"
assert len(MOTION_MAGIC) == 16

VOLUMETRIC_COLUMNS = ("rvedv", "rvesv", "rvef")


@dataclass(frozen=True, eq=False)
class MotionSample:
    """Time-resolved vertex positions for one subject.

    ``coords[v, t]`` is the (x, y, z) position of vertex ``v`` at frame
    ``t`` (both zero-based here; frame 0 is the displacement reference).
    """

    subject_id: str
    coords: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        if coords.ndim != 3 or coords.shape[2] != 3:
            raise MalformedInputError(
                f"subject {self.subject_id}: coords must have shape (V, T, 3), got {coords.shape}"
            )
        if coords.shape[0] < 1 or coords.shape[1] < 2:
            raise MalformedInputError(f"subject {self.subject_id}: need V >= 1 and T >= 2, got {coords.shape[:2]}")
        if not np.all(np.isfinite(coords)):
            raise MalformedInputError(f"subject {self.subject_id}: coordinates must be finite")
        coords.setflags(write=False)
        object.__setattr__(self, "subject_id", str(self.subject_id))
        object.__setattr__(self, "coords", coords)

    @classmethod
    def from_trajectories(cls, subject_id, trajectories: Sequence) -> "MotionSample":
        """Build from a list of per-vertex ``(T, 3)`` trajectories."""
        lengths = {len(tr) for tr in trajectories}
        if len(lengths) > 1:
            raise MalformedInputError(f"subject {subject_id}: vertices have differing frame counts {sorted(lengths)}")
        return cls(subject_id, np.stack([np.asarray(tr, dtype=float) for tr in trajectories]))

    @property
    def n_vertices(self) -> int:
        return self.coords.shape[0]

    @property
    def frame_count(self) -> int:
        return self.coords.shape[1]

    def trajectory(self, v: int) -> np.ndarray:
        return self.coords[v]


def feature_length(n_vertices: int, n_frames: int) -> int:
    return 3 * (n_frames - 1) * n_vertices


def build_displacement_vector(sample: MotionSample) -> np.ndarray:
    """Displacement of every vertex from its frame-1 position, flattened.

    Examples
    --------
    >>> s = MotionSample("a", [[[0, 0, 0], [1, 2, 3], [2, 2, 2]]])
    >>> build_displacement_vector(s).tolist()
    [1.0, 2.0, 3.0, 2.0, 2.0, 2.0]
    """
    c = sample.coords
    return (c[:, 1:, :] - c[:, :1, :]).reshape(-1)


def build_feature_matrix(samples: Sequence[MotionSample]) -> np.ndarray:
    """Stack displacement vectors into an ``(n, 3*(T-1)*V)`` matrix."""
    if not samples:
        raise MalformedInputError("no motion samples supplied")
    shape = samples[0].coords.shape
    for s in samples:
        if s.coords.shape != shape:
            raise MalformedInputError(
                f"subject {s.subject_id} has shape {s.coords.shape}, expected {shape} like the rest of the cohort"
            )
    return np.stack([build_displacement_vector(s) for s in samples])


def mean_displacement_per_vertex(sample: MotionSample) -> np.ndarray:
    """Mean over frames 2..T of each vertex's distance from its frame-1 position."""
    c = sample.coords
    return np.linalg.norm(c[:, 1:, :] - c[:, :1, :], axis=2).mean(axis=1)


@dataclass
class SyntheticCohortConfig:
    """Parameters of the planted-signal cohort generator.

    ``signal_strength`` is the log-hazard coefficient on the latent risk;
    ``motion_coupling`` scales how strongly the latent risk damps the
    contraction of the signal vertices. ``volumetric_correlation`` is the
    correlation between the latent risk and the severity factor behind the
    three pseudo-volumetric covariates.
    """

    n_subjects: int = 302
    V: int = 202
    T: int = 20
    event_fraction_target: float = 0.28
    signal_strength: float = 1.0
    noise_sd: float = 0.1
    seed: int = 0
    signal_fraction: float = 0.25
    motion_coupling: float = 0.3
    nuisance_coupling: float = 0.3
    volumetric_correlation: float = 0.3
    baseline_hazard: float = 1.0 / 1500.0

    def validate(self) -> None:
        if self.n_subjects < 2:
            raise ConfigError(f"n_subjects must be >= 2, got {self.n_subjects}")
        if self.V < 1:
            raise ConfigError(f"V must be >= 1, got {self.V}")
        if self.T < 2:
            raise ConfigError(f"T must be >= 2, got {self.T}")
        if not 0.0 < self.event_fraction_target < 1.0:
            raise ConfigError(f"event_fraction_target must lie in (0, 1), got {self.event_fraction_target}")
        if self.signal_strength < 0 or not math.isfinite(self.signal_strength):
            raise ConfigError(f"signal_strength must be finite and >= 0, got {self.signal_strength}")
        if self.noise_sd < 0 or not math.isfinite(self.noise_sd):
            raise ConfigError(f"noise_sd must be finite and >= 0, got {self.noise_sd}")
        if not 0.0 < self.signal_fraction <= 1.0:
            raise ConfigError(f"signal_fraction must lie in (0, 1], got {self.signal_fraction}")
        if not -1.0 <= self.volumetric_correlation <= 1.0:
            raise ConfigError(f"volumetric_correlation must lie in [-1, 1], got {self.volumetric_correlation}")
        if self.baseline_hazard <= 0:
            raise ConfigError("baseline_hazard must be positive")


@dataclass
class SyntheticCohort:
    samples: List[MotionSample]
    outcomes: SurvivalData
    planted_risk: np.ndarray
    covariates: np.ndarray
    signal_vertices: np.ndarray
    config: SyntheticCohortConfig
    censor_window: float = field(default=float("nan"))

    def features(self) -> np.ndarray:
        return build_feature_matrix(self.samples)


def _template_mesh(V: int):
    """Deterministic ellipsoidal template (Fibonacci lattice) and inward normals."""
    k = np.arange(V) + 0.5
    z = 1.0 - 2.0 * k / V
    rho = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    unit = np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])
    points = unit * np.array([10.0, 8.0, 14.0])
    base_amplitude = 1.0 + 0.5 * (1.0 - z) / 2.0
    return points, -unit, base_amplitude


def _calibrate_censoring(event_times, uniforms, target):
    """Window length ``W`` so that ``mean(T < W*U)`` is as close to ``target`` as possible."""
    def fraction(w):
        return float(np.mean(event_times < w * uniforms))

    lo = 1e-9 * float(event_times.min())
    hi = 1e9 * float(event_times.max())
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if fraction(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi / lo < 1 + 1e-12:
            break
    return lo if abs(fraction(lo) - target) <= abs(fraction(hi) - target) else hi


def generate_synthetic_cohort(config: SyntheticCohortConfig) -> SyntheticCohort:
    """Seeded cohort with a planted link between motion and survival.

    Each subject draws a latent risk ``r ~ N(0, 1)``. The contraction
    amplitude of a designated vertex subset (the ``signal_fraction`` of
    vertices with the largest template z-coordinate) is multiplied by
    ``exp(-motion_coupling * r)``; the remaining vertices are scaled by an
    independent nuisance factor. Every coordinate receives Gaussian noise
    with sd ``noise_sd``. Survival times are exponential with log-hazard
    ``log(baseline_hazard) + signal_strength * r``, and administrative
    censoring is uniform on ``[0, W]`` with ``W`` found by bisection so the
    realised event fraction is as close as possible to the target.

    Per-subject draws come from independent counter-based streams keyed
    by subject index, so the output is identical for a fixed seed.
    """
    config.validate()
    n, V, T = config.n_subjects, config.V, config.T
    points, inward, base_amp = _template_mesh(V)
    n_signal = max(1, int(round(config.signal_fraction * V)))
    signal_vertices = np.sort(np.argsort(-points[:, 2], kind="stable")[:n_signal])
    is_signal = np.zeros(V, bool)
    is_signal[signal_vertices] = True
    cycle = 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(T) / T))

    rho = config.volumetric_correlation
    risks = np.empty(n)
    event_times = np.empty(n)
    uniforms = np.empty(n)
    covariates = np.empty((n, 3))
    samples = []
    width = len(str(n - 1))
    for i in range(n):
        rng = stream(config.seed, "subject", i)
        r = rng.standard_normal()
        nuisance = rng.standard_normal()
        offset = rng.normal(scale=5.0, size=3)
        noise = rng.standard_normal((V, T, 3))
        e_time = rng.exponential()
        u_censor = rng.uniform()
        e_sev, e_vol = rng.standard_normal(2)

        scale = np.where(is_signal, np.exp(-config.motion_coupling * r), np.exp(config.nuisance_coupling * nuisance))
        amplitude = base_amp * scale
        coords = (
            points[:, None, :]
            + offset
            + amplitude[:, None, None] * cycle[None, :, None] * inward[:, None, :]
            + config.noise_sd * noise
        )
        sid = f"S{i:0{width}d}"
        samples.append(MotionSample(sid, coords))

        risks[i] = r
        event_times[i] = e_time / (config.baseline_hazard * math.exp(config.signal_strength * r))
        uniforms[i] = u_censor
        severity = rho * r + math.sqrt(max(0.0, 1.0 - rho * rho)) * e_sev
        ef = min(80.0, max(5.0, 38.0 - 13.7 * severity))
        edv = 194.0 * math.exp(0.3 * (0.5 * severity + math.sqrt(0.75) * e_vol))
        covariates[i] = (edv, edv * (1.0 - ef / 100.0), ef)

    window = _calibrate_censoring(event_times, uniforms, config.event_fraction_target)
    censor_times = window * uniforms
    event = (event_times < censor_times).astype(int)
    time = np.where(event == 1, event_times, censor_times)
    outcomes = SurvivalData(time, event, [s.subject_id for s in samples])
    return SyntheticCohort(samples, outcomes, risks, covariates, signal_vertices, config, window)


def planted_concordance(signal_strength: float) -> float:
    """Expected concordance of the true latent risk, ignoring censoring.

    For exponential times, ``P(T_i < T_j) = sigmoid(s * (r_i - r_j))``; with
    ``r_i - r_j ~ N(0, 2)`` the expected concordance is
    ``E[sigmoid(s * |D|)]``.
    """
    s = float(signal_strength)
    if s == 0:
        return 0.5
    sd = math.sqrt(2.0)

    def integrand(d):
        return 2.0 * special.expit(s * d) * math.exp(-0.5 * (d / sd) ** 2) / (sd * math.sqrt(2 * math.pi))

    value, _ = integrate.quad(integrand, 0.0, np.inf)
    return float(value)


# ---------------------------------------------------------------------------
# file formats


def _cohort_shape(samples: Sequence[MotionSample]):
    if not samples:
        raise MalformedInputError("cannot write an empty cohort")
    V, T = samples[0].coords.shape[:2]
    for s in samples:
        if s.coords.shape[:2] != (V, T):
            raise MalformedInputError(f"subject {s.subject_id} does not match cohort shape {(V, T)}")
    return V, T


def write_motion_csv(path, samples: Sequence[MotionSample]) -> None:
    """Write ``V,T,n_subjects`` then, per subject, its id and ``v,t,x,y,z`` lines (1-based v, t)."""
    V, T = _cohort_shape(samples)
    vt = [(v + 1, t + 1) for v in range(V) for t in range(T)]
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{V},{T},{len(samples)}\n")
        for s in samples:
            if "," in s.subject_id or "\n" in s.subject_id:
                raise MalformedInputError(f"subject id {s.subject_id!r} cannot contain commas or newlines")
            fh.write(f"{s.subject_id}\n")
            flat = s.coords.reshape(-1, 3)
            fh.writelines(
                f"{v},{t},{x!r},{y!r},{z!r}\n" for (v, t), (x, y, z) in zip(vt, flat.tolist())
            )


def read_motion_csv(path) -> List[MotionSample]:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise MalformedInputError(f"{path}: empty file")
    try:
        V, T, n = (int(x) for x in lines[0].split(","))
    except ValueError:
        raise MalformedInputError(f"{path}:1: header must be 'V,T,n_subjects', got {lines[0]!r}") from None
    block = V * T + 1
    if len(lines) - 1 != n * block:
        raise MalformedInputError(f"{path}: expected {n * block + 1} lines for V={V}, T={T}, n={n}, got {len(lines)}")
    samples = []
    for i in range(n):
        start = 1 + i * block
        sid = lines[start]
        try:
            rows = np.array([ln.split(",") for ln in lines[start + 1 : start + block]], dtype=float)
        except ValueError as exc:
            raise MalformedInputError(f"{path}: subject {sid}: {exc}") from None
        if rows.shape != (V * T, 5):
            raise MalformedInputError(f"{path}: subject {sid}: rows must have 5 fields")
        v = rows[:, 0].astype(int) - 1
        t = rows[:, 1].astype(int) - 1
        if v.min() < 0 or v.max() >= V or t.min() < 0 or t.max() >= T:
            raise MalformedInputError(f"{path}: subject {sid}: vertex/frame index out of range")
        coords = np.full((V, T, 3), np.nan)
        seen = np.zeros((V, T), bool)
        seen[v, t] = True
        if not seen.all() or len(set(zip(v.tolist(), t.tolist()))) != V * T:
            raise MalformedInputError(f"{path}: subject {sid}: every (v, t) must appear exactly once")
        coords[v, t] = rows[:, 2:]
        samples.append(MotionSample(sid, coords))
    return samples


def write_motion_binary(path, samples: Sequence[MotionSample]) -> None:
    """Binary container: magic, int64 ``V, T, n``, float64 coords, then subject ids.

    Coordinates are written per subject in ``(V, T, 3)`` C order. The
    trailing id block is an int64 byte length followed by newline-joined
    UTF-8 ids.
    """
    V, T = _cohort_shape(samples)
    ids = "\n".join(s.subject_id for s in samples).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MOTION_MAGIC)
        fh.write(struct.pack("<qqq", V, T, len(samples)))
        for s in samples:
            fh.write(np.ascontiguousarray(s.coords, dtype="<f8").tobytes())
        fh.write(struct.pack("<q", len(ids)))
        fh.write(ids)


def read_motion_binary(path) -> List[MotionSample]:
    path = Path(path)
    data = path.read_bytes()
    if data[:16] != MOTION_MAGIC:
        raise MalformedInputError(f"{path}: not a binary motion file")
    if len(data) < 40:
        raise MalformedInputError(f"{path}: truncated header")
    V, T, n = struct.unpack_from("<qqq", data, 16)
    n_values = V * T * 3 * n
    end = 40 + 8 * n_values
    if len(data) < end:
        raise MalformedInputError(f"{path}: coordinate block truncated")
    block = np.frombuffer(data, dtype="<f8", count=n_values, offset=40).reshape(n, V, T, 3)
    if len(data) >= end + 8:
        (id_len,) = struct.unpack_from("<q", data, end)
        ids = data[end + 8 : end + 8 + id_len].decode("utf-8").split("\n") if n else []
    else:
        ids = [str(i) for i in range(n)]
    if len(ids) != n:
        raise MalformedInputError(f"{path}: {len(ids)} subject ids for {n} subjects")
    return [MotionSample(sid, block[i].astype(float)) for i, sid in enumerate(ids)]


def read_motion(path) -> List[MotionSample]:
    """Read either motion format, detected from the file's first bytes."""
    with Path(path).open("rb") as fh:
        head = fh.read(16)
    if head == MOTION_MAGIC:
        return read_motion_binary(path)
    return read_motion_csv(path)


def write_motion(path, samples: Sequence[MotionSample]) -> None:
    if str(path).endswith(".bin"):
        write_motion_binary(path, samples)
    else:
        write_motion_csv(path, samples)


def write_covariates_csv(path, subject_ids: Sequence[str], covariates, columns=VOLUMETRIC_COLUMNS) -> None:
    covariates = np.asarray(covariates, dtype=float)
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(("subject_id",) + tuple(columns)) + "\n")
        for sid, row in zip(subject_ids, covariates.tolist()):
            fh.write(",".join([sid] + [repr(x) for x in row]) + "\n")


def read_covariates_csv(path, columns=None):
    """Return ``(subject_ids, matrix, column_names)``; ``columns`` selects a subset."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if not header or header[0] != "subject_id":
            raise MalformedInputError(f"{path}: first column must be subject_id")
        names = header[1:]
        wanted = list(columns) if columns else names
        missing = [c for c in wanted if c not in names]
        if missing:
            raise MalformedInputError(f"{path}: missing covariate columns {missing}")
        cols = [names.index(c) + 1 for c in wanted]
        ids, rows = [], []
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(",")
            if len(parts) != len(header):
                raise MalformedInputError(f"{path}:{lineno}: expected {len(header)} fields")
            ids.append(parts[0])
            try:
                rows.append([float(parts[c]) for c in cols])
            except ValueError as exc:
                raise MalformedInputError(f"{path}:{lineno}: {exc}") from None
    return ids, np.array(rows, dtype=float).reshape(len(ids), len(wanted)), wanted
