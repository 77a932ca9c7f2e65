"""Kernel gradient flow regression with simultaneous confidence bands."""

from kgflow.errors import (
    DegenerateCovarianceError,
    DomainError,
    KGFlowError,
    NumericalError,
    StabilityError,
    UnsupportedOperationError,
)
from kgflow.estimators import (
    Dataset,
    FittedEstimator,
    SpectralCache,
    decompose,
    evaluation_grid,
    fit_kgf_iterative,
    fit_kgf_spectral,
    fit_krr,
    predict,
    residuals,
    sup_error,
)
from kgflow.filters import FilterParams, apply_filter, phi, psi
from kgflow.inference import (
    BandResult,
    CovarianceDiag,
    FilterVectorField,
    bootstrap_sup_samples,
    build_band,
    confidence_band,
    covers,
    empirical_cov_diag,
    filter_vectors,
    population_cov_diag,
    population_estimate,
    quantile,
)
from kgflow.kernels import (
    CustomMercer,
    Kernel,
    MinKernel,
    PeriodicMatern32,
    eval_kernel,
    gram,
    mercer_partial_sum,
    min_spectrum,
    parse_kernel,
)

__version__ = "0.1.0"
