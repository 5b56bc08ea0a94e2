"""Localized sparse-variate PCA for multilevel multivariate functional data.

The pipeline decomposes repeated multivariate curves into subject-level
and replicate-level variation by the method of moments, then extracts
interpretable components from each covariance operator through a convex
relaxation solved by an alternating-direction method: components are
smooth in time, can be exactly zero on entire variates, and can be
exactly zero on parts of the time domain.
"""

from .correlation import (
    ReplicateCorrelation,
    compute_dissociation,
    dissociation_profile,
    estimate_rho,
)
from .covariance import (
    CovariancePair,
    compute_c,
    estimate_covariances,
    estimate_noise_variance,
)
from .dataset import (
    FunctionalDataset,
    demean_by_replicate,
    load_dataset,
    write_dataset,
)
from .estimator import LocalizedMultilevelFPCA
from .penalties import (
    PenaltyMatrix,
    block_group_shrink,
    build_second_difference_penalty,
    soft_threshold,
)
from .scores import ScoreSet, blup_scores, empirical_eigenvalues, plugin_eigenvalues
from .simulate import (
    MethodSpec,
    SimulationConfig,
    bspline_basis,
    evaluate_components,
    generate_dataset,
    run_method_grid,
)
from .solver import (
    AdmmState,
    Component,
    admm_solve,
    extract_components,
    project_deflated_fantope,
)
from .tuning import (
    TuningConfig,
    select_alpha_lambda_cv,
    select_alpha_lambda_rfve,
    select_gamma_cv,
    tune_penalties,
)

__version__ = "0.1.0"

__all__ = [
    "AdmmState",
    "Component",
    "CovariancePair",
    "FunctionalDataset",
    "LocalizedMultilevelFPCA",
    "MethodSpec",
    "PenaltyMatrix",
    "ReplicateCorrelation",
    "ScoreSet",
    "SimulationConfig",
    "TuningConfig",
    "admm_solve",
    "block_group_shrink",
    "blup_scores",
    "bspline_basis",
    "build_second_difference_penalty",
    "compute_c",
    "compute_dissociation",
    "demean_by_replicate",
    "dissociation_profile",
    "empirical_eigenvalues",
    "estimate_covariances",
    "estimate_noise_variance",
    "estimate_rho",
    "evaluate_components",
    "extract_components",
    "generate_dataset",
    "load_dataset",
    "plugin_eigenvalues",
    "project_deflated_fantope",
    "run_method_grid",
    "select_alpha_lambda_cv",
    "select_alpha_lambda_rfve",
    "select_gamma_cv",
    "soft_threshold",
    "tune_penalties",
    "write_dataset",
]
