"""Active kinematic calibration of serial arms with Gaussian-process residual models."""

from .acquisition import BetaSchedule, CandidatePool, beta_t, grid_pool, lhs_pool, run_campaign
from .arm import MeasurementModel, PerturbationSpec, ResidualField, TrueArm, measure, realize, residual
from .config import ExperimentConfig, load_config
from .errors import (ConfigError, DomainError, IllConditionedKernelError, NotFittedError,
                     PoolExhaustedError)
from .gp import Hyperparams, TrainingSet, fit, nlml, optimize_hyper, predict
from .harness import emit_outputs, residual_histogram, run_experiment, sweep_perturbation
from .kinematics import DHLink, DHTable, Pose7, forward_kinematics, parameter_jacobian
from .linearized import QPProblem, calibrate_linearized, solve_qp
from .records import RunRecord
from .residual import RefitPolicy, ResidualModel, corrected_fk, holdout_error, predict_residual, update
from .robots import Robot, builtin

__version__ = "0.1.0"
