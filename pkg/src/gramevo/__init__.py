"""Surrogate-assisted regularized evolution over a grammar-defined
neural-architecture search space."""

__version__ = "0.1.0"

from .augment import AugmentedSample, augment, expand_dataset
from .compiler import ArchGraph, TensorShape, compile_tree, infer_shape, verify_graph
from .encoder import ArchString, encode_plain, encode_with_shapes, parse_arch
from .evaluator import (
    ExternalCommandEvaluator,
    ReplayEvaluator,
    SyntheticDepthEvaluator,
    SyntheticLinearEvaluator,
)
from .evolution import Individual, Population, SearchConfig, run_search, tournament_select
from .features import FeatureVector, assemble_input, extract_graf
from .grammar import (
    DerivationTree,
    Grammar,
    OpSpec,
    Production,
    default_grammar,
    load_grammar,
    load_grammar_file,
    mutate_subtree,
    sample_tree,
    validate_tree,
)
from .metrics import CorrelationReport, correlation_report, kendall_tau, spearman_rho
from .surrogate import (
    ForestModel,
    Normalizer,
    TrainingRow,
    TrainingSet,
    fit_forest,
    fit_normalizer,
    normalize,
)

__all__ = [
    "ArchGraph",
    "ArchString",
    "AugmentedSample",
    "CorrelationReport",
    "DerivationTree",
    "ExternalCommandEvaluator",
    "FeatureVector",
    "ForestModel",
    "Grammar",
    "Individual",
    "Normalizer",
    "OpSpec",
    "Population",
    "Production",
    "ReplayEvaluator",
    "SearchConfig",
    "SyntheticDepthEvaluator",
    "SyntheticLinearEvaluator",
    "TensorShape",
    "TrainingRow",
    "TrainingSet",
    "assemble_input",
    "augment",
    "compile_tree",
    "correlation_report",
    "default_grammar",
    "encode_plain",
    "encode_with_shapes",
    "expand_dataset",
    "extract_graf",
    "fit_forest",
    "fit_normalizer",
    "infer_shape",
    "kendall_tau",
    "load_grammar",
    "load_grammar_file",
    "mutate_subtree",
    "normalize",
    "parse_arch",
    "run_search",
    "sample_tree",
    "spearman_rho",
    "tournament_select",
    "validate_tree",
    "verify_graph",
]
