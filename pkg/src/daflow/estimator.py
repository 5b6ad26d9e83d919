"""scikit-learn style front end to the trainers."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .metrics import filter_means, test_loglik
from .models import ProblemConfig, ThetaParams, build_problem
from .training import TrainConfig, Trainer
from .validation import check_observations, check_positive_int, check_seed, check_states


class SSMLearner(TransformerMixin, BaseEstimator):
    """Learn state-space dynamics from observation sequences.

    Parameters mirror the experiment config.  ``fit`` takes observations of
    shape ``(T, d_y)`` or ``(B, T, d_y)``.

    Attributes
    ----------
    theta_ : ThetaParams
        Learned parameters.
    history_ : list of TrainRecord
        One record per gradient (or EM) update.
    problem_ : Problem
        The assembled model, reference model and starting point.
    """

    def __init__(self, problem="parameterized", d_x=10, observe="full",
                 obs_var=None, init_var=None, method="adenkf-t", N=50, L=20,
                 epochs=60, optimizer="adam", eta0=0.1, tau=0.5, I0=10,
                 eta_alpha=None, eta_beta=None, taper_radius=5, inflation=0.0,
                 lag=0, J=3, random_state=0, problem_seed=0):
        self.problem = problem
        self.d_x = d_x
        self.observe = observe
        self.obs_var = obs_var
        self.init_var = init_var
        self.method = method
        self.N = N
        self.L = L
        self.epochs = epochs
        self.optimizer = optimizer
        self.eta0 = eta0
        self.tau = tau
        self.I0 = I0
        self.eta_alpha = eta_alpha
        self.eta_beta = eta_beta
        self.taper_radius = taper_radius
        self.inflation = inflation
        self.lag = lag
        self.J = J
        self.random_state = random_state
        self.problem_seed = problem_seed

    def _problem_config(self) -> ProblemConfig:
        linear = self.problem == "linear"
        return ProblemConfig(
            d_x=self.d_x, observe=self.observe,
            obs_var=self.obs_var if self.obs_var is not None else (0.5 if linear else 1.0),
            init_var=self.init_var if self.init_var is not None else (4.0 if linear else 50.0),
            seed=self.problem_seed)

    def _train_config(self) -> TrainConfig:
        truncated = self.method.endswith("-t")
        return TrainConfig(
            method=self.method, iterations=self.epochs, N=self.N,
            optimizer=self.optimizer, eta0=self.eta0, I0=self.I0, tau=self.tau,
            eta_alpha=self.eta_alpha, eta_beta=self.eta_beta,
            L=self.L if truncated else None, seed=check_seed(self.random_state),
            taper_radius=self.taper_radius, inflation=self.inflation,
            lag=self.lag, J=self.J)

    def fit(self, Y, y=None, theta0: ThetaParams | None = None):
        check_positive_int("N", self.N, 2)
        check_positive_int("epochs", self.epochs)
        self.problem_ = build_problem(self.problem, self._problem_config())
        model = self.problem_.model
        Y, _ = check_observations(Y, model.d_y)
        trainer = Trainer(model, self._train_config(), self.problem_.alpha_ref)
        state = trainer.fit(theta0 or self.problem_.theta0, Y)
        self.theta_ = state.theta
        self.history_ = trainer.records
        self.n_features_in_ = model.d_y
        return self

    def transform(self, Y):
        """Filter means under the learned model, ``(T, d_x)`` per sequence."""
        check_is_fitted(self, "theta_")
        arr, single = check_observations(Y, self.n_features_in_)
        means = filter_means(self.problem_.model, self.theta_, arr, N=self.N,
                             seed=check_seed(self.random_state),
                             taper_radius=self.taper_radius)
        return means[0] if single else means

    def predict(self, X):
        """One observation-interval flow ``F_alpha`` of each state row."""
        check_is_fitted(self, "theta_")
        model = self.problem_.model
        X = check_states(X, model.d_x)
        out = model.transition(dict(self.theta_.items()), X.T)
        return np.asarray(out).T

    def score(self, Y, y=None) -> float:
        """EnKF log-likelihood estimate of held-out sequences."""
        check_is_fitted(self, "theta_")
        arr, _ = check_observations(Y, self.n_features_in_)
        return test_loglik(self.problem_.model, self.theta_, arr, "enkf", self.N,
                           check_seed(self.random_state), self.taper_radius)
