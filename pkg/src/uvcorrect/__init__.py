"""Removal of unwanted variation from expression matrices for unsupervised
analysis: estimators of the unwanted factors, fixed and random-alpha
corrections, alternating estimation with clustering or sparse dictionaries,
evaluation tools and a synthetic data generator."""

from .correction import (
    CorrectionResult,
    IterationConfig,
    calibrate_lambda,
    correct_mean_center,
    correct_naive_fixed,
    correct_random_alpha,
    correct_ratio,
    correct_replicate,
    default_nu,
    iterate_correction,
)
from .data import (
    ControlGeneSet,
    DataError,
    ExpressionMatrix,
    ReplicateDifferenceSet,
    SampleAnnotations,
    build_differences,
    center_by_factor,
    load_annotations,
    load_controls,
    load_matrix,
)
from .estimation import (
    DegenerateError,
    UVModel,
    combine_w,
    estimate_w_control_genes,
    estimate_w_replicates,
    estimate_w_residuals,
    known_w,
    replicate_rank_diagnostic,
)
from .evaluation import clustering_distance, variance_filter
from .linalg import QuadraticNormSpec, quad_norm_sq, ridge_solve, sigma_to_w, truncated_svd
from .pipeline import PipelineConfig, SuiteConfig, __version__, run_benchmark, run_pipeline
from .synthgen import GeneratorSpec, generate, two_feature_demo
from .unsupervised import (
    Partition,
    kmeans,
    kmeans_sigma_relaxed,
    kmeans_sigma_rowwise,
    map_shrunk_regression,
    sparse_dictionary,
)
