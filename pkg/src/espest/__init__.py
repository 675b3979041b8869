"""Empirical saddlepoint (ESP) estimation and testing for just-identified moment models."""

from .errors import (
    EmptySupportError,
    EspError,
    InvalidInputError,
    InvalidRestrictionError,
    NoRootFoundError,
    NumericDomainError,
    SingularMatrixError,
    SupportBoundaryError,
    UnsupportedOperationError,
)
from .esp_objective import EspEvaluation, EspProblem, evaluate, gradient_objective, profile, sigma_tilted
from .estimation import (
    EstimationResult,
    Restriction,
    estimate_constrained,
    estimate_esp,
    estimate_et,
    estimate_mm_et,
)
from .inference import (
    ConfidenceRegion,
    TestResult,
    alr_test,
    chi2_quantile,
    chi2_sf,
    et_test,
    invert_confidence_region,
    lm_test,
    trinity_tests,
    wald_test,
)
from .moment_model import (
    HALL_HOROWITZ_THETA0,
    Dataset,
    MomentModel,
    builtin_crra,
    builtin_hall_horowitz,
    builtin_location,
    read_csv,
)
from .simulation import McConfig, run_mc
from .tilting import TiltingSolution, TiltStatus, kl_divergence, solve_tilt, tau_jacobian

__version__ = "0.1.0"
