"""Doubly robust empirical-likelihood estimation with responses missing at random."""
from ._backend import BACKEND
from .data import (Dataset, Diagnostic, EstimatingFunction, Observation, PropensityModel, RegressionModel,
                   complete_cases, mean_response_function, read_csv, term_design, validate_dataset)
from .el import ELState, build_g, el_weights, log_star, solve_lambda
from .errors import (BootstrapError, ConfigError, DataError, EdrError, InfeasibleError, NonConvergenceError,
                     NoVariationError, RankDeficientError, SeparationError, SingularMatrixError)
from .estimators import (EstimateReport, EstimatorOptions, edr_mean_response, estimate_all, estimate_cca,
                         estimate_edr, estimate_el_profile, estimate_ht, estimate_rrz, profile_el_loglik,
                         solve_outer)
from .inference import CovarianceReport, bootstrap_se, var_edr, var_ht, var_rrz
from .nuisance import (PropensityFit, RegressionFit, fit_propensity, fit_regression, jac_U1, jac_U2,
                       propensity_scores, score_U1, score_U2)

__version__ = "0.1.0"

from . import analysis, config, simlab  # noqa: E402
