"""Differentially private stochastic convex optimization for heavy-tailed
gradients, with moment estimation, loss oracles, and a benchmark harness."""

from ._kernels import active_backend
from .core import (Ball, ConstraintSet, TncReport, TncSpec, ball, intersect,
                   project_ball, project_set, verify_tnc)
from .data import Dataset, materialize_synthetic, parse_libsvm, split
from .errors import (CalibrationInfeasibleError, ConvergenceFailureError,
                     DatasetTooSmallError, InvalidArgumentError,
                     NumericalFailureError, OutOfRangeError, ParseError,
                     ScheduleError)
from .estimator import (MomentProfile, clipped_mean, clipped_mean_bias_bound,
                        empirical_moment, estimate_moment_profile,
                        weighted_moment_R)
from .losses import (LossOracle, SamplerSpec, heavy_tailed_sampler,
                     l4_regression_oracle, logistic_l2_oracle,
                     synthetic_tnc_oracle)
from .optim import (OptimResult, PhaseSchedule, RunRecord,
                    clipped_regularized_gd, dp_sgd_baseline, iterated_lncgm,
                    iterated_pnca_sgd, lncgm, lncgm_schedule, pnca_sgd,
                    private_stochastic_approximation)
from .privacy import (PrivacyBudget, ZcdpBudget, add_gaussian,
                      clipped_mean_sensitivity, gaussian_sigma,
                      shuffle_amplified_sigma, zcdp_to_dp)

__version__ = "0.1.0"
