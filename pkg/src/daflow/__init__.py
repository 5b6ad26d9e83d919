"""Differentiable ensemble Kalman filtering for learning state-space dynamics."""

from .autodiff import NonFiniteError, NotPSDError, Tape
from .enkf import EnkfConfig, FilterDivergenceError, run_filter
from .estimator import SSMLearner
from .kalman import exact_loglik, exact_loglik_and_grad, reference_mle
from .models import ProblemConfig, StateSpaceModel, ThetaParams, build_problem
from .particle import PfConfig, run_pf
from .rng import make_rng
from .training import TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = [
    "EnkfConfig", "FilterDivergenceError", "NonFiniteError", "NotPSDError",
    "PfConfig", "ProblemConfig", "SSMLearner", "StateSpaceModel", "Tape",
    "ThetaParams", "TrainConfig", "Trainer", "build_problem", "exact_loglik",
    "exact_loglik_and_grad", "make_rng", "reference_mle", "run_filter", "run_pf",
]
