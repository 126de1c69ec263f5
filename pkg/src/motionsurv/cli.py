"""Command-line pipelines driven by a single TOML configuration file.

Every subcommand derives its randomness from the master seed through a
named sub-stream, writes its artifacts into the output directory and
records a run manifest beside them. Relative paths in the config file are
resolved against the directory holding the file.

Exit codes: 0 success, 2 input or configuration error, 3 numerical failure.
"""

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import scipy
import tomli

from . import __version__
from .errors import ConfigError, InputError, MalformedInputError, NumericalError
from .hyperopt import Axis, SearchSpace, SwarmConfig, tune_network, write_trace_csv
from .interpret import laplacian_eigenmaps, saliency_map, write_embedding_csv, write_saliency_csv
from .motion import (
    VOLUMETRIC_COLUMNS,
    SyntheticCohortConfig,
    build_feature_matrix,
    generate_synthetic_cohort,
    read_covariates_csv,
    read_motion,
    write_covariates_csv,
    write_motion,
)
from .network import NetworkSpec, TrainConfig, latent_codes, load_model, predict_risk, save_model, train
from .seeding import derive_seed
from .survival import concordance_index, kaplan_meier, logrank_test, read_survival_csv, write_survival_csv
from .validation import (
    NetworkTrainer,
    benchmark_conventional,
    bootstrap_optimism,
    compare_models,
    stratify_by_median_risk,
    write_km_csv,
    write_logrank_csv,
    write_report_json,
)

log = logging.getLogger("motionsurv")

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3

_NETWORK_KEYS = {f.name for f in fields(NetworkSpec)} - {"input_dim"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}


@dataclass
class Paths:
    motion: Path = Path("cohort/motion.bin")
    survival: Path = Path("cohort/survival.csv")
    covariates: Path = Path("cohort/covariates.csv")
    output_dir: Path = Path("out")
    model: Path = Path("out/model.json")


@dataclass
class ValidateBlock:
    B: int = 50
    fast_validation: bool = False
    tune: bool = True
    benchmark_columns: List[str] = field(default_factory=lambda: list(VOLUMETRIC_COLUMNS))
    n_permutations: int = 10_000


@dataclass
class InterpretBlock:
    k: int = 10
    log_display: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    generate: SyntheticCohortConfig = field(default_factory=SyntheticCohortConfig)
    network: Dict[str, object] = field(default_factory=dict)
    training: TrainConfig = field(default_factory=TrainConfig)
    space: SearchSpace = field(default_factory=SearchSpace.default)
    swarm: SwarmConfig = field(default_factory=SwarmConfig)
    validate: ValidateBlock = field(default_factory=ValidateBlock)
    interpret: InterpretBlock = field(default_factory=InterpretBlock)
    source_digest: str = ""


def _take(block: dict, allowed, section: str) -> dict:
    unknown = sorted(set(block) - set(allowed))
    if unknown:
        raise ConfigError(f"[{section}] unknown field(s): {', '.join(unknown)}")
    return dict(block)


def _build(cls, block: dict, section: str, skip=()):
    names = {f.name for f in fields(cls)} - set(skip)
    kwargs = _take(block, names, section)
    try:
        obj = cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"[{section}] {exc}") from exc
    if hasattr(obj, "validate"):
        obj.validate()
    return obj


def _space_from(block: dict) -> SearchSpace:
    axes = []
    for name, ax in block.items():
        if not isinstance(ax, dict):
            raise ConfigError(f"[tune.space.{name}] must be a table with lower and upper")
        kw = _take(ax, {"lower", "upper", "log", "integer"}, f"tune.space.{name}")
        if "lower" not in kw or "upper" not in kw:
            raise ConfigError(f"[tune.space.{name}] needs lower and upper")
        axes.append(Axis(name, float(kw["lower"]), float(kw["upper"]), bool(kw.get("log", False)),
                         bool(kw.get("integer", False))))
    return SearchSpace(tuple(axes))


def load_config(path: Optional[Path]) -> ExperimentConfig:
    """Parse and validate the experiment configuration.

    Recognised tables: ``[paths]``, ``[generate]``, ``[train]``, ``[tune]``
    (with optional ``[tune.space.<axis>]`` tables), ``[validate]`` and
    ``[interpret]``; the top-level ``seed`` is the master seed.
    """
    if path is None:
        raw, base, digest = {}, Path.cwd(), hashlib.sha256(b"").hexdigest()
    else:
        path = Path(path)
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            raw = tomli.loads(data.decode("utf-8"))
        except (tomli.TOMLDecodeError, UnicodeDecodeError) as exc:
            raise ConfigError(f"config {path}: {exc}") from exc
        base, digest = path.resolve().parent, hashlib.sha256(data).hexdigest()

    _take(raw, {"seed", "paths", "generate", "train", "tune", "validate", "interpret"}, "top level")
    cfg = ExperimentConfig(source_digest=digest)
    cfg.seed = int(raw.get("seed", 0))

    paths = _take(raw.get("paths", {}), {f.name for f in fields(Paths)}, "paths")
    cfg.paths = Paths(**{k: Path(v) for k, v in paths.items()})
    for f in fields(Paths):
        p = getattr(cfg.paths, f.name)
        setattr(cfg.paths, f.name, p if p.is_absolute() else base / p)

    cfg.generate = _build(SyntheticCohortConfig, raw.get("generate", {}), "generate", skip=("seed",))

    train_block = _take(raw.get("train", {}), _NETWORK_KEYS | _TRAIN_KEYS, "train")
    cfg.network = {k: v for k, v in train_block.items() if k in _NETWORK_KEYS}
    NetworkSpec(input_dim=10 ** 6, **cfg.network).validate()
    cfg.training = _build(TrainConfig, {k: v for k, v in train_block.items() if k in _TRAIN_KEYS}, "train")

    tune_block = dict(raw.get("tune", {}))
    space = tune_block.pop("space", None)
    cfg.swarm = _build(SwarmConfig, tune_block, "tune", skip=("seed",))
    if space is not None:
        cfg.space = _space_from(space)

    cfg.validate = _build(ValidateBlock, raw.get("validate", {}), "validate")
    if cfg.validate.B < 1:
        raise ConfigError(f"[validate] B must be >= 1, got {cfg.validate.B}")
    cfg.interpret = _build(InterpretBlock, raw.get("interpret", {}), "interpret")
    if cfg.interpret.k < 1:
        raise ConfigError(f"[interpret] k must be >= 1, got {cfg.interpret.k}")
    return cfg


# ---------------------------------------------------------------------------
# shared helpers


def _load_cohort(cfg: ExperimentConfig):
    for p in (cfg.paths.motion, cfg.paths.survival):
        if not p.exists():
            raise MalformedInputError(f"input file not found: {p}")
    samples = read_motion(cfg.paths.motion)
    outcomes = read_survival_csv(cfg.paths.survival)
    ids = [s.subject_id for s in samples]
    if list(outcomes.subject_id) != ids:
        raise MalformedInputError("motion and survival files list different subjects or orders")
    return samples, outcomes


def _load_model(cfg: ExperimentConfig):
    if not cfg.paths.model.exists():
        raise MalformedInputError(f"model file not found: {cfg.paths.model}")
    return load_model(cfg.paths.model)


def _out(cfg: ExperimentConfig, name: str) -> Path:
    cfg.paths.output_dir.mkdir(parents=True, exist_ok=True)
    return cfg.paths.output_dir / name


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# subcommands; each returns the list of artifacts it wrote


def cmd_generate(cfg: ExperimentConfig, args) -> List[Path]:
    gen = SyntheticCohortConfig(**{**asdict(cfg.generate), "seed": derive_seed(cfg.seed, "generate")})
    cohort = generate_synthetic_cohort(gen)
    ids = [s.subject_id for s in cohort.samples]
    for p in (cfg.paths.motion, cfg.paths.survival, cfg.paths.covariates):
        p.parent.mkdir(parents=True, exist_ok=True)
    write_motion(cfg.paths.motion, cohort.samples)
    write_survival_csv(cfg.paths.survival, cohort.outcomes)
    write_covariates_csv(cfg.paths.covariates, ids, cohort.covariates)
    print(f"subjects          {len(ids)}")
    print(f"feature length    {cohort.features().shape[1]}")
    print(f"event fraction    {cohort.outcomes.event_fraction:.4f}")
    return [cfg.paths.motion, cfg.paths.survival, cfg.paths.covariates]


def cmd_train(cfg: ExperimentConfig, args) -> List[Path]:
    samples, outcomes = _load_cohort(cfg)
    X = build_feature_matrix(samples)
    spec = NetworkSpec(X.shape[1], **cfg.network)
    spec.validate()
    tc = TrainConfig(**{**asdict(cfg.training), "seed": derive_seed(cfg.seed, "train")})
    model = train(spec, X, outcomes, tc)
    cfg.paths.model.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, cfg.paths.model)
    c = concordance_index(predict_risk(model, X), outcomes)
    print(f"parameters        {model.n_parameters()}")
    print(f"final loss        {model.loss_trace[-1]:.6g}")
    print(f"training C        {c:.4f}")
    written = [cfg.paths.model]
    sidecar = cfg.paths.model.with_name(cfg.paths.model.name + ".bin")
    if sidecar.exists():
        written.append(sidecar)
    return written


def cmd_tune(cfg: ExperimentConfig, args) -> List[Path]:
    samples, outcomes = _load_cohort(cfg)
    X = build_feature_matrix(samples)
    swarm = SwarmConfig(**{**asdict(cfg.swarm), "seed": derive_seed(cfg.seed, "tune")})
    result = tune_network(X, outcomes, cfg.space, swarm, train_config=cfg.training, jobs=args.jobs)
    trace, best = _out(cfg, "tune_trace.csv"), _out(cfg, "best_hyperparameters.json")
    write_trace_csv(trace, result, cfg.space)
    _write_json(best, {"best_score": result.best_score, "hyperparameters": result.best_position})
    print(f"best CV C         {result.best_score:.4f}")
    for k, v in result.best_position.items():
        print(f"  {k:<16}{v}")
    return [trace, best]


def cmd_validate(cfg: ExperimentConfig, args) -> List[Path]:
    samples, outcomes = _load_cohort(cfg)
    X = build_feature_matrix(samples)
    vb = cfg.validate
    seed = derive_seed(cfg.seed, "validate")
    fast = vb.fast_validation or args.fast_validation
    max_excl = 0.0 if args.strict else 0.1
    trainer = NetworkTrainer(dict(cfg.network), cfg.training, jobs=args.jobs)
    if vb.tune:
        trainer.space, trainer.swarm = cfg.space, cfg.swarm
    net = bootstrap_optimism(trainer, X, outcomes, vb.B, seed, fast_validation=fast, jobs=args.jobs,
                             max_excluded_fraction=max_excl)
    written = [_out(cfg, "validation_network.json")]
    write_report_json(written[0], net)
    print("network")
    print(net.summary())

    if vb.benchmark_columns:
        if not cfg.paths.covariates.exists():
            raise MalformedInputError(f"covariate file not found: {cfg.paths.covariates}")
        ids, Z, _ = read_covariates_csv(cfg.paths.covariates, vb.benchmark_columns)
        if list(ids) != list(outcomes.subject_id):
            raise MalformedInputError("covariate file lists different subjects or orders")

        def conventional(Zb, ob, s):
            return benchmark_conventional(Zb, ob, s)

        bench = bootstrap_optimism(conventional, Z, outcomes, vb.B, seed, jobs=args.jobs,
                                   max_excluded_fraction=max_excl)
        cmp = compare_models(net, bench, n_permutations=vb.n_permutations, seed=seed)
        written += [_out(cfg, "validation_benchmark.json"), _out(cfg, "comparison.json")]
        write_report_json(written[1], bench)
        _write_json(written[2], {**asdict(cmp), "ci_95": list(cmp.ci_95), "model_a": "network",
                                 "model_b": "conventional"})
        print("conventional")
        print(bench.summary())
        lo, hi = cmp.ci_95
        print(f"difference        {cmp.mean_difference:+.4f}  (95% CI {lo:+.4f} to {hi:+.4f}, p={cmp.p_value:.4g})")
    return written


def _risk_table(cfg):
    samples, outcomes = _load_cohort(cfg)
    model = _load_model(cfg)
    X = build_feature_matrix(samples)
    return samples, outcomes, model, X, predict_risk(model, X)


def cmd_predict(cfg: ExperimentConfig, args) -> List[Path]:
    samples, outcomes, _, _, risks = _risk_table(cfg)
    path = _out(cfg, "risk.csv")
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write("subject_id,risk\n")
        for s, r in zip(samples, risks):
            fh.write(f"{s.subject_id},{float(r)!r}\n")
    print(f"wrote {len(samples)} risk scores; C = {concordance_index(risks, outcomes):.4f}")
    return [path]


def cmd_interpret(cfg: ExperimentConfig, args) -> List[Path]:
    samples, outcomes, model, X, _ = _risk_table(cfg)
    k = min(cfg.interpret.k, len(samples) - 1)
    emb = laplacian_eigenmaps(latent_codes(model, X), k, strict=args.strict)
    sal = saliency_map(model, samples)
    e_path, s_path = _out(cfg, "embedding.csv"), _out(cfg, "saliency.csv")
    write_embedding_csv(e_path, [s.subject_id for s in samples], emb, outcomes)
    write_saliency_csv(s_path, sal, cfg.interpret.log_display)
    top = np.argsort(-sal.abs_coefficient, kind="stable")[:5] + 1
    print(f"eigenvalues       {', '.join(f'{v:.4g}' for v in emb.eigenvalues)}"
          + ("  (degenerate)" if emb.degenerate else ""))
    print(f"top vertices      {', '.join(map(str, top))}")
    return [e_path, s_path]


def cmd_km(cfg: ExperimentConfig, args) -> List[Path]:
    _, outcomes, _, _, risks = _risk_table(cfg)
    low, high = stratify_by_median_risk(risks, outcomes)
    result = logrank_test(low, high)
    km_path, lr_path = _out(cfg, "km.csv"), _out(cfg, "logrank.csv")
    write_km_csv(km_path, {"low": kaplan_meier(low), "high": kaplan_meier(high)})
    write_logrank_csv(lr_path, result, len(low), len(high))
    print(f"low {len(low)} / high {len(high)}; logrank chi2 = {result.statistic:.4f}, p = {result.p_value:.4g}")
    return [km_path, lr_path]


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "tune": cmd_tune,
    "validate": cmd_validate,
    "predict": cmd_predict,
    "interpret": cmd_interpret,
    "km": cmd_km,
}


def write_manifest(cfg: ExperimentConfig, command: str, artifacts: List[Path], started: datetime,
                   wall: float) -> Path:
    path = _out(cfg, f"manifest_{command}.json")
    _write_json(path, {
        "command": command,
        "seed": cfg.seed,
        "config_sha256": cfg.source_digest,
        "versions": {"motionsurv": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "artifacts": {str(p.name): _file_digest(p) for p in artifacts},
        "started": started.isoformat(),
        "wall_time_s": round(wall, 3),
    })
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="motionsurv", description="Survival prediction from mesh motion.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, help="TOML experiment configuration")
    parser.add_argument("--seed", type=int, help="master seed (overrides the config)")
    parser.add_argument("--jobs", type=int, default=1, help="worker threads for replicates and particles")
    parser.add_argument("--fast-validation", action="store_true",
                        help="reuse full-sample hyperparameters inside bootstrap replicates")
    parser.add_argument("--strict", action="store_true", help="turn recoverable numerical warnings into errors")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    started = datetime.now(timezone.utc)
    t0 = time.perf_counter()
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        artifacts = COMMANDS[args.command](cfg, args)
        write_manifest(cfg, args.command, artifacts, started, time.perf_counter() - t0)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical error in {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
