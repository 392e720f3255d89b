"""Projection-based two-sample tests for sparsely observed multivariate functional data.

Pipeline: penalized-spline mean and covariance estimation, multivariate
functional PCA, BLUP score prediction, and Hotelling-type tests on the
scores, plus a Monte-Carlo harness for size and power studies.
"""

from .bspline import (
    GramRoot,
    SplineBasis,
    difference_penalty,
    eval_basis,
    gram_matrix,
    make_basis,
)
from .covariance import (
    CovarianceFit,
    PairProducts,
    RawCovariances,
    estimate_noise_variance,
    evaluate_covariance,
    evaluate_covariance_grid,
    fit_covariance,
    raw_covariances,
)
from .dataset import (
    DataFormatError,
    MvFunctionalDataset,
    ObservationRecord,
    SubjectSeries,
    load_long_format,
    negate_components,
    save_long_format,
    standardize_outcomes,
)
from .eigen import MvEigenSystem, eval_eigenfunction, multivariate_eigen, select_K_by_pve
from .meanfit import MeanFit, fit_mean, predict_mean, residuals
from .penalized import EstimationError
from .scores import ScoreMatrix, blup_scores, dense_scores, predict_trajectory, write_scores
from .simulate import (
    LAMBDA_TRUE,
    SPARSITY_SUPPORTS,
    SimConfig,
    SimTruth,
    StudyRow,
    generate_dataset,
    power_study,
    size_study,
    treatment_effect_curve,
    true_covariance,
    true_eigenfunctions,
    true_mean,
    write_study_table,
    write_truth,
)
from .testing import (
    BandResult,
    PipelineConfig,
    TestReport,
    bootstrap_band,
    hotelling_equal,
    hotelling_unequal,
    manova_lh,
    permutation_test,
    two_sample_pipeline,
    write_report,
)

__version__ = "0.1.0"
