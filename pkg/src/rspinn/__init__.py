"""Backpropagation-free PINNs via randomized smoothing."""
from .losses import LossValue, boundary_loss, residual_loss, total_loss
from .nn import AdamState, MlpModel, adam_step, backward_params, forward_batch
from .pdes import PROBLEMS, PdeProblem, UnsupportedModeError, make_problem
from .sampling import ConfigError, RngStream, draw_noise_groups, draw_perturbation_groups
from .smoothing import (
    estimate_gradient,
    estimate_hessian,
    estimate_laplacian,
    estimate_time_derivative,
    estimate_value,
    smooth,
)
from .trainer import RunRecord, TrainConfig, evaluate_error, run_suite, train

__version__ = "0.1.0"

__all__ = [
    "LossValue", "boundary_loss", "residual_loss", "total_loss",
    "AdamState", "MlpModel", "adam_step", "backward_params", "forward_batch",
    "PROBLEMS", "PdeProblem", "UnsupportedModeError", "make_problem",
    "ConfigError", "RngStream", "draw_noise_groups", "draw_perturbation_groups",
    "estimate_gradient", "estimate_hessian", "estimate_laplacian", "estimate_time_derivative",
    "estimate_value", "smooth",
    "RunRecord", "TrainConfig", "evaluate_error", "run_suite", "train",
]
