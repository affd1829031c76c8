"""SVD-factored Kalman filtering with analytic sensitivities and maximum-likelihood estimation."""

from .errors import (
    ConfigError,
    DegenerateSingularValuesError,
    DidNotConvergeError,
    FilterError,
    NonFiniteStateError,
    NotPDError,
    NotPSDError,
    NotSymmetricError,
    RankDeficientError,
    ShapeMismatchError,
    SingularInnovationCovarianceError,
    SvdKfError,
    ZeroSingularValueError,
)
from .estimation import (
    EstimateOptions,
    NllEvaluation,
    OptimizerReport,
    bfgs_minimize,
    estimate,
    evaluate_nll,
    fd_gradient_oracle,
    grad_nll_conventional,
    grad_nll_svd,
    nll_conventional,
    nll_svd,
)
from .filters import (
    DiffKfTrace,
    DiffSvdKfTrace,
    KfTrace,
    SvdKfTrace,
    diff_kf_run,
    diff_svd_kf_run,
    kf_run,
    svd_kf_run,
    svd_measurement_update,
    svd_time_update,
)
from .model import (
    FactorDerivs,
    ModelInstance,
    ParametrizedModel,
    Trajectory,
    constant_model,
    evaluate,
    init_factors,
    satellite_model,
    simulate,
)
from .svd_diff import (
    DiffSvdResult,
    SvdFactors,
    SvdTriple,
    differentiated_svd,
    fd_svd_oracle,
    svd_factorize,
    sym_spectral_factors,
)

__version__ = "0.1.0"
