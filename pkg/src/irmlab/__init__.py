"""Numerical laboratory for invariant risk minimization in a Gaussian latent model."""

from .model import (EnvironmentParams, EnvironmentSet, InvariantParams, ObservationMap, Samples,
                    invert_observation, optimal_invariant_predictor, sample_environment)
from .predictors import LinearPredictor
from .risk import (RiskReport, irm_penalty, irm_penalty_population, logistic_risk_quadrature, risk_report,
                   risk_variance, zero_one_risk_closed)
from .constructions import (closeness_report, bayes_coefficients, build_environmental_predictor,
                            build_feasible_noninvariant_featurizer, check_nondegeneracy, erm_env_classifier,
                            gamma_closeness, solve_max_projection)
from .trainers import TrainConfig, TrainingDiverged, stationarity_check, train
from .nonlinear import (PiecewiseFeaturizer, TestEnvironmentSpec, build_phi_epsilon, build_reversed_test_env,
                        evaluate_on_test, match_fractions, penalty_bound)

__version__ = "0.1.0"
