"""Supervised denoising autoencoder with a Cox prediction head.

Architecture (``H`` hidden units, ``d`` latent units)::

    x --mask--> xc --W1,b1,relu--> h1 --W2,b2,relu--> z
    z --W3,b3,relu--> h2 --W4,b4--> reconstruction
    z --w--> risk                      (linear, no bias)

The loss is ``alpha * L_rec + (1 - alpha) * L_cox + l1 * sum|W|`` where
``L_rec`` is the squared reconstruction error against the clean input,
averaged over the batch and (by default) over input elements; with
``reconstruction_reduction="sum"`` the per-subject error is the full
squared norm. ``L_cox`` is the negative Cox log partial likelihood with
risk sets formed inside the batch. Corrupted entries are set to zero with
no rescaling of the survivors. Gradients are computed by hand; training
uses Adam.
"""

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .errors import ConfigError, MalformedInputError, TrainingError
from .seeding import stream
from .survival import SurvivalData, cox_loss_and_gradient

__all__ = [
    "NetworkSpec",
    "TrainConfig",
    "NetworkModel",
    "Adam",
    "PARAM_NAMES",
    "WEIGHT_NAMES",
    "init_model",
    "forward",
    "draw_masks",
    "loss_components",
    "hybrid_loss",
    "backward",
    "train",
    "predict_risk",
    "latent_codes",
    "save_model",
    "load_model",
]

log = logging.getLogger(__name__)

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4", "w")
WEIGHT_NAMES = ("W1", "W2", "W3", "W4", "w")
FORMAT_NAME = "motionsurv-network"
FORMAT_VERSION = 1


@dataclass
class NetworkSpec:
    input_dim: int
    hidden_units: int = 100
    latent_dim: int = 10
    dropout_rate: float = 0.3
    alpha: float = 0.5
    l1_penalty: float = 1e-6
    learning_rate: float = 3e-5
    reconstruction_reduction: str = "mean"

    @property
    def gamma(self) -> float:
        return 1.0 - self.alpha

    def validate(self) -> None:
        if self.input_dim < 2:
            raise ConfigError(f"input_dim must be >= 2, got {self.input_dim}")
        if self.hidden_units < 1:
            raise ConfigError(f"hidden_units must be >= 1, got {self.hidden_units}")
        if not 1 <= self.latent_dim < self.input_dim:
            raise ConfigError(f"latent_dim must satisfy 1 <= latent_dim < input_dim, got {self.latent_dim}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.l1_penalty < 0:
            raise ConfigError(f"l1_penalty must be >= 0, got {self.l1_penalty}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.reconstruction_reduction not in ("mean", "sum"):
            raise ConfigError(
                f"reconstruction_reduction must be 'mean' or 'sum', got {self.reconstruction_reduction!r}"
            )

    def reconstruction_scale(self) -> float:
        """Divisor applied to the per-subject squared error."""
        return float(self.input_dim) if self.reconstruction_reduction == "mean" else 1.0


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    dtype: str = "float32"

    def validate(self) -> None:
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")


class Adam:
    """Adam with the canonical constants, updating parameters in place."""

    def __init__(self, params: Dict[str, np.ndarray], learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self._buf = {k: np.empty_like(v) for k, v in params.items()}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = math.sqrt(1.0 - b2 ** self.t)
        # lr * (m/c1) / (sqrt(v)/c2 + eps) == (lr*c2/c1) * m / (sqrt(v) + eps*c2)
        scale = self.learning_rate * c2 / c1
        eps = self.eps * c2
        for k, p in params.items():
            g, m, v, buf = grads[k], self.m[k], self.v[k], self._buf[k]
            np.subtract(g, m, out=buf)
            buf *= 1.0 - b1
            m += buf
            np.multiply(g, g, out=buf)
            buf -= v
            buf *= 1.0 - b2
            v += buf
            np.sqrt(v, out=buf)
            buf += eps
            np.divide(m, buf, out=buf)
            buf *= scale
            p -= buf


@dataclass
class NetworkModel:
    spec: NetworkSpec
    params: Dict[str, np.ndarray]
    loss_trace: List[float] = field(default_factory=list)
    optimizer: Optional[Adam] = field(default=None, repr=False, compare=False)

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def _shapes(spec: NetworkSpec):
    d, H, h = spec.input_dim, spec.hidden_units, spec.latent_dim
    return {
        "W1": (H, d), "b1": (H,),
        "W2": (h, H), "b2": (h,),
        "W3": (H, h), "b3": (H,),
        "W4": (d, H), "b4": (d,),
        "w": (h,),
    }


def init_model(spec: NetworkSpec, seed: int = 0) -> NetworkModel:
    """He-uniform weights scaled by fan-in, zero biases."""
    spec.validate()
    rng = stream(seed, "init")
    params = {}
    for name, shape in _shapes(spec).items():
        if name.startswith("b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[-1] if len(shape) == 2 else spec.latent_dim
            bound = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return NetworkModel(spec, params)


def _as_batch(model: NetworkModel, x) -> np.ndarray:
    X = np.asarray(x, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.spec.input_dim:
        raise MalformedInputError(f"expected inputs of length {model.spec.input_dim}, got shape {np.shape(x)}")
    return X


def draw_masks(rng: np.random.Generator, shape, dropout_rate: float) -> np.ndarray:
    """Binary keep-masks: each entry is zeroed with probability ``dropout_rate``."""
    return (rng.random(shape) >= dropout_rate).astype(float)


def _encode_decode(p, Xc):
    a1 = Xc @ p["W1"].T + p["b1"]
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ p["W2"].T + p["b2"]
    z = np.maximum(a2, 0.0)
    a3 = z @ p["W3"].T + p["b3"]
    h2 = np.maximum(a3, 0.0)
    recon = h2 @ p["W4"].T + p["b4"]
    risk = z @ p["w"]
    return {"a1": a1, "h1": h1, "a2": a2, "z": z, "a3": a3, "h2": h2, "recon": recon, "risk": risk}


def forward(model: NetworkModel, x, corruption_mask=None, training: bool = False, rng=None):
    """Run the network on one input vector or a batch.

    In training mode the input is corrupted with ``corruption_mask`` if
    given, otherwise with a fresh mask drawn from ``rng``. Inference mode
    never corrupts.

    Returns
    -------
    reconstruction, risk, latent
        Shaped like the input: 1-D input gives a vector, a scalar risk and
        a latent vector.
    """
    single = np.ndim(x) == 1
    X = _as_batch(model, x)
    if training:
        if corruption_mask is None:
            if rng is None:
                raise ValueError("training-mode forward needs a mask or an rng")
            corruption_mask = draw_masks(rng, X.shape, model.spec.dropout_rate)
        mask = np.asarray(corruption_mask, dtype=float)
        if mask.size != X.size:
            raise MalformedInputError(f"mask has {mask.size} entries for input of shape {X.shape}")
        X = X * mask.reshape(X.shape)
    cache = _encode_decode(model.params, X)
    if single:
        return cache["recon"][0], float(cache["risk"][0]), cache["z"][0]
    return cache["recon"], cache["risk"], cache["z"]


def _l1(params) -> float:
    return float(sum(np.abs(params[k]).sum() for k in WEIGHT_NAMES))


def _check_batch(model, X, outcomes, masks):
    X = _as_batch(model, X)
    if X.shape[0] != len(outcomes):
        raise MalformedInputError(f"{X.shape[0]} inputs for {len(outcomes)} outcomes")
    if masks is None:
        masks = np.ones_like(X)
    masks = np.asarray(masks, dtype=float)
    if masks.shape != X.shape:
        raise MalformedInputError(f"mask shape {masks.shape} does not match batch shape {X.shape}")
    return X, masks


def loss_components(model: NetworkModel, batch_x, batch_outcomes: SurvivalData, masks=None) -> Dict[str, float]:
    """Reconstruction, survival and L1 terms plus the weighted total."""
    X, masks = _check_batch(model, batch_x, batch_outcomes, masks)
    cache = _encode_decode(model.params, X * masks)
    diff = cache["recon"] - X
    rec = float(np.sum(diff * diff)) / (X.shape[0] * model.spec.reconstruction_scale())
    if batch_outcomes.n_events == 0:
        warnings.warn("batch has no events; survival term is zero", RuntimeWarning, stacklevel=2)
    surv, _ = cox_loss_and_gradient(cache["risk"], batch_outcomes.time, batch_outcomes.event)
    l1 = model.spec.l1_penalty * _l1(model.params)
    a = model.spec.alpha
    return {"reconstruction": rec, "survival": surv, "l1": l1, "total": a * rec + (1.0 - a) * surv + l1}


def hybrid_loss(model: NetworkModel, batch_x, batch_outcomes: SurvivalData, masks=None) -> float:
    return loss_components(model, batch_x, batch_outcomes, masks)["total"]


def _loss_and_grads(params, spec, X, masks, time, event):
    n = X.shape[0]
    a = spec.alpha
    Xc = X * masks
    c = _encode_decode(params, Xc)
    diff = c["recon"] - X
    denom = n * spec.reconstruction_scale()
    rec = float(np.sum(diff * diff)) / denom
    surv, g_risk = cox_loss_and_gradient(c["risk"], time, event)
    l1 = spec.l1_penalty * _l1(params)
    loss = a * rec + (1.0 - a) * surv + l1

    g = {}
    d_recon = (2.0 * a / denom) * diff
    g["W4"] = d_recon.T @ c["h2"]
    g["b4"] = d_recon.sum(axis=0)
    d_a3 = (d_recon @ params["W4"]) * (c["a3"] > 0)
    g["W3"] = d_a3.T @ c["z"]
    g["b3"] = d_a3.sum(axis=0)
    g_risk = (1.0 - a) * g_risk
    g["w"] = c["z"].T @ g_risk
    d_z = d_a3 @ params["W3"] + np.outer(g_risk, params["w"])
    d_a2 = d_z * (c["a2"] > 0)
    g["W2"] = d_a2.T @ c["h1"]
    g["b2"] = d_a2.sum(axis=0)
    d_a1 = (d_a2 @ params["W2"]) * (c["a1"] > 0)
    g["W1"] = d_a1.T @ Xc
    g["b1"] = d_a1.sum(axis=0)
    if spec.l1_penalty:
        for k in WEIGHT_NAMES:
            g[k] += spec.l1_penalty * np.sign(params[k])
    return loss, g


def backward(model: NetworkModel, batch_x, batch_outcomes: SurvivalData, masks=None):
    """Hybrid loss and its exact gradient with respect to every parameter.

    The L1 term contributes ``l1_penalty * sign(W)`` (zero at zero).

    Returns
    -------
    loss : float
    grads : dict
        Same keys and shapes as ``model.params``.
    """
    X, masks = _check_batch(model, batch_x, batch_outcomes, masks)
    return _loss_and_grads(model.params, model.spec, X, masks, batch_outcomes.time, batch_outcomes.event)


def train(spec: NetworkSpec, features, outcomes: SurvivalData, config: TrainConfig = None) -> NetworkModel:
    """Fit the network with Adam on mini-batches.

    Runs ``epochs * ceil(n / batch_size)`` Adam steps. Subjects are
    reshuffled every epoch and a fresh corruption mask is drawn for every
    step, all from streams derived from ``config.seed``. Arithmetic runs in
    ``config.dtype`` (single precision by default, which halves the cost
    of the large input/output layers); the returned parameters are double
    precision. The model's ``loss_trace`` holds the mean batch loss of each
    epoch.
    """
    config = config or TrainConfig()
    config.validate()
    spec.validate()
    X = np.asarray(features, dtype=float)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise MalformedInputError(f"features must have shape (n, {spec.input_dim}), got {X.shape}")
    n = X.shape[0]
    if n != len(outcomes):
        raise MalformedInputError(f"{n} feature rows for {len(outcomes)} outcomes")
    if n < 2:
        raise TrainingError("training needs at least two subjects")
    if n < config.batch_size:
        log.debug("n=%d is smaller than batch_size=%d; using one batch per epoch", n, config.batch_size)

    dtype = np.dtype(config.dtype)
    model = init_model(spec, config.seed)
    params = {k: v.astype(dtype) for k, v in model.params.items()}
    X = X.astype(dtype, copy=False)
    opt = Adam(params, spec.learning_rate)
    shuffle_rng = stream(config.seed, "shuffle")
    mask_rng = stream(config.seed, "mask")
    time, event = outcomes.time, outcomes.event
    trace = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = X[idx]
            masks = draw_masks(mask_rng, xb.shape, spec.dropout_rate).astype(dtype, copy=False)
            loss, grads = _loss_and_grads(params, spec, xb, masks, time[idx], event[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}")
            opt.step(params, grads)
            losses.append(loss)
        trace.append(float(np.mean(losses)))
    model.params = {k: v.astype(float) for k, v in params.items()}
    model.loss_trace = trace
    model.optimizer = opt
    return model


def predict_risk(model: NetworkModel, x):
    """Log hazard ratio ``w . z`` from the uncorrupted input.

    Accepts a single feature vector (returns a float) or an ``(n, d)``
    matrix (returns an array of ``n`` risks).
    """
    single = np.ndim(x) == 1
    X = _as_batch(model, x)
    risk = _encode_decode(model.params, X)["risk"]
    return float(risk[0]) if single else risk


def latent_codes(model: NetworkModel, x) -> np.ndarray:
    X = _as_batch(model, x)
    return _encode_decode(model.params, X)["z"]


# ---------------------------------------------------------------------------
# serialisation


def save_model(model: NetworkModel, path, *, sidecar: Optional[bool] = None) -> None:
    """Write the model as versioned JSON.

    Parameters go inline as row-major lists of doubles, or, with
    ``sidecar=True``, into ``<path>.bin`` as little-endian float64 blocks
    referenced by byte offset. ``None`` picks the sidecar above 100k
    parameters. Both forms round-trip bit-exactly.
    """
    path = Path(path)
    if sidecar is None:
        sidecar = model.n_parameters() > 100_000
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "spec": asdict(model.spec),
        "training_loss": [float(x) for x in model.loss_trace],
        "encoding": "sidecar" if sidecar else "inline",
        "parameters": {},
    }
    if sidecar:
        bin_path = path.with_name(path.name + ".bin")
        doc["sidecar"] = bin_path.name
        offset = 0
        with bin_path.open("wb") as fh:
            for name in PARAM_NAMES:
                arr = np.ascontiguousarray(model.params[name], dtype="<f8")
                fh.write(arr.tobytes())
                doc["parameters"][name] = {"shape": list(arr.shape), "dtype": "<f8", "offset": offset}
                offset += arr.nbytes
    else:
        for name in PARAM_NAMES:
            arr = model.params[name]
            doc["parameters"][name] = {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
    with path.open("w", encoding="utf-8") as fh:
        json.dump(doc, fh, allow_nan=False)


def load_model(path) -> NetworkModel:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedInputError(f"{path}: not valid JSON ({exc})") from None
    if doc.get("format") != FORMAT_NAME:
        raise MalformedInputError(f"{path}: not a {FORMAT_NAME} file")
    if doc.get("version") != FORMAT_VERSION:
        raise MalformedInputError(f"{path}: unsupported format version {doc.get('version')}")
    spec = NetworkSpec(**doc["spec"])
    spec.validate()
    expected = _shapes(spec)
    blob = None
    if doc.get("encoding") == "sidecar":
        blob = (path.parent / doc["sidecar"]).read_bytes()
    params = {}
    for name in PARAM_NAMES:
        entry = doc["parameters"].get(name)
        if entry is None:
            raise MalformedInputError(f"{path}: missing parameter {name}")
        shape = tuple(entry["shape"])
        if shape != expected[name]:
            raise MalformedInputError(f"{path}: parameter {name} has shape {shape}, expected {expected[name]}")
        count = int(np.prod(shape))
        if blob is not None:
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=entry["offset"]).astype(float)
        else:
            arr = np.array(entry["data"], dtype=float)
            if arr.size != count:
                raise MalformedInputError(f"{path}: parameter {name} has {arr.size} values, expected {count}")
        params[name] = arr.reshape(shape)
    return NetworkModel(spec, params, list(doc.get("training_loss", [])))
