"""Doubly robust score tests and confidence intervals for the partially
linear model, with cross-fitted machine-learning nuisances."""

from .dataset import Dataset, FoldPlan, load_csv, make_fold_plan
from .errors import (
    DegenerateVarianceError,
    DrdmlError,
    ExperimentError,
    InputError,
    InversionError,
    NonInvertibleError,
    ParameterError,
    ParseError,
    SchemaError,
    ShapeError,
    SizeError,
    StackFitError,
)
from .inference import ConfidenceSet, SearchConfig, dml_point_estimate, invert_test, naive_estimate
from .kernel import KernelFit, KernelSpec, nw_fit, nw_predict
from .learners import (
    FittedLearner,
    LearnerSpec,
    OracleSpec,
    default_stack_spec,
    fit,
    fit_stack,
    predict,
)
from .score import (
    FoldNuisances,
    NuisancePair,
    ScoreResult,
    cross_fit_scores,
    psi_star,
    score_test,
    solve_alpha,
    solve_beta,
)
from .simulate import (
    DgpSpec,
    MetricRow,
    MetricTable,
    ScenarioSpec,
    draw,
    misspecified_l1_spec,
    oracle_scenario,
    run_experiment,
    standard_scenario,
)

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "FoldPlan",
    "load_csv",
    "make_fold_plan",
    "LearnerSpec",
    "OracleSpec",
    "FittedLearner",
    "fit",
    "predict",
    "fit_stack",
    "default_stack_spec",
    "KernelSpec",
    "KernelFit",
    "nw_fit",
    "nw_predict",
    "NuisancePair",
    "ScoreResult",
    "FoldNuisances",
    "score_test",
    "cross_fit_scores",
    "solve_alpha",
    "solve_beta",
    "psi_star",
    "ConfidenceSet",
    "SearchConfig",
    "dml_point_estimate",
    "naive_estimate",
    "invert_test",
    "DgpSpec",
    "ScenarioSpec",
    "MetricRow",
    "MetricTable",
    "draw",
    "run_experiment",
    "standard_scenario",
    "oracle_scenario",
    "misspecified_l1_spec",
    "DrdmlError",
    "SchemaError",
    "ParseError",
    "SizeError",
    "ParameterError",
    "ShapeError",
    "InputError",
    "DegenerateVarianceError",
    "NonInvertibleError",
    "InversionError",
    "ExperimentError",
    "StackFitError",
    "__version__",
]
