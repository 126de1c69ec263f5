"""Survival prediction from cardiac mesh motion with a supervised denoising autoencoder."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    InputError,
    MalformedInputError,
    NumericalError,
    StratificationError,
    TrainingError,
    UndefinedResultError,
)
from .survival import (  # noqa: E402
    SurvivalData,
    concordance_index,
    cox_neg_log_partial_likelihood,
    fit_cox_l2,
    kaplan_meier,
    logrank_test,
)
from .motion import MotionSample, SyntheticCohortConfig, build_feature_matrix, generate_synthetic_cohort  # noqa: E402
from .network import NetworkSpec, TrainConfig, predict_risk, train  # noqa: E402
from .hyperopt import SearchSpace, SwarmConfig, pso_optimize, tune_network  # noqa: E402
from .validation import bootstrap_optimism, benchmark_conventional, compare_models, stratify_by_median_risk  # noqa: E402
from .interpret import laplacian_eigenmaps, saliency_map  # noqa: E402
