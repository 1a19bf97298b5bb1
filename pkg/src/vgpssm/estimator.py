"""scikit-learn style front end."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .benchmark import gaussian_metrics
from .exceptions import InvalidArgumentError
from .smoothing import bootstrap_fixed_lag_smoother, build_auxiliary
from .sparse import InducingPosterior, TransitionPredictor, rollout
from .training import (
    THETA_GROUPS,
    PowerSchedule,
    TrainingConfig,
    TrainingState,
    initialize_model,
    online_update,
    train,
)


class VariationalGPSSM(BaseEstimator):
    """Variational GP state-space model learned with particle smoothing.

    ``fit`` takes an observation series ``Y`` of shape (T, E).  The fitted
    transition model maps states to next states: ``predict(X)`` returns the
    predictive mean of ``x_{t+1}`` given ``x_t = X``.

    Parameters
    ----------
    state_dim : int
        Latent state dimension D.
    n_inducing : int
        Number of inducing inputs M.
    kernel : {"matern32", "matern52", "se"}
    likelihood : {"gaussian", "poisson"}
    structure : {"free", "second_order"}
    dt : float
        Integration step of the ``second_order`` structure.
    mode : {"batch", "svi"}
        Full-series or segment-subsampled training.
    segment_length : int, optional
        Segment length for ``mode="svi"``.
    n_particles, lag : int
        Particle count and lag of the fixed-lag smoother.
    max_iters, min_iters : int
    tol : float
        Relative ELBO change between trailing windows that stops training.
    learning_rate : float
        Initial hyperparameter step size.
    learn_hyperparameters : bool
        If False only ``q(u)`` is fitted.
    random_state : int
    callback : callable, optional
        Receives a progress record after every iteration.

    Attributes
    ----------
    model_ : GpssmModel
    q_u_ : InducingPosterior
    state_ : TrainingState
    elbo_trace_ : list of float
    n_iter_ : int
    converged_ : bool
    """

    def __init__(self, state_dim=1, n_inducing=15, kernel="matern32", likelihood="gaussian",
                 structure="free", dt=1.0, mode="batch", segment_length=None, n_particles=1000,
                 lag=10, max_iters=150, min_iters=20, tol=1e-4, learning_rate=0.3,
                 learn_hyperparameters=True, random_state=0, callback=None):
        self.state_dim = state_dim
        self.n_inducing = n_inducing
        self.kernel = kernel
        self.likelihood = likelihood
        self.structure = structure
        self.dt = dt
        self.mode = mode
        self.segment_length = segment_length
        self.n_particles = n_particles
        self.lag = lag
        self.max_iters = max_iters
        self.min_iters = min_iters
        self.tol = tol
        self.learning_rate = learning_rate
        self.learn_hyperparameters = learn_hyperparameters
        self.random_state = random_state
        self.callback = callback

    def _config(self, mode=None):
        return TrainingConfig(
            mode=mode or self.mode,
            n_particles=self.n_particles,
            lag=self.lag,
            segment_length=self.segment_length,
            lam=PowerSchedule(self.learning_rate, 1.0, 0.51),
            max_iters=self.max_iters,
            min_iters=self.min_iters,
            tol=self.tol,
            seed=self.random_state,
            learn=THETA_GROUPS if self.learn_hyperparameters else (),
        )

    def _check_series(self, Y):
        return check_array(Y, ensure_min_samples=2, dtype=float)

    def fit(self, Y, y=None):
        """Learn the transition model from an observation series ``Y`` (T, E)."""
        Y = self._check_series(Y)
        init = initialize_model(Y, self.state_dim, self.n_inducing, self.kernel,
                                self.likelihood, self.structure, self.dt)
        self._set_state(train(Y, self._config(), init=init, callback=self.callback))
        return self

    def partial_fit(self, Y, y=None):
        """Fold a new observation segment into ``q(u)``; hyperparameters stay fixed.

        On an unfitted estimator the model is initialized from ``Y`` first.
        """
        Y = check_array(Y, dtype=float)
        if not hasattr(self, "state_"):
            init = initialize_model(Y, self.state_dim, self.n_inducing, self.kernel,
                                    self.likelihood, self.structure, self.dt)
            state = TrainingState(init, InducingPosterior.prior(init))
        else:
            state = self.state_
        self._set_state(online_update(state, Y, self._config("online")))
        return self

    def _set_state(self, state):
        self.state_ = state
        self.model_ = state.model
        self.q_u_ = state.q_u
        self.elbo_trace_ = list(state.elbo_trace)
        self.n_iter_ = state.iteration
        self.converged_ = state.converged
        self.n_features_in_ = state.model.likelihood.obs_dim
        self._predictor = TransitionPredictor(state.q_u, state.model)

    def _check_states(self, X):
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.model_.state_dim:
            raise InvalidArgumentError(
                f"states have {X.shape[1]} columns, model has state dimension {self.model_.state_dim}")
        return X

    def predict(self, X, return_std=False):
        """Predictive mean (and std) of the next state given states ``X`` (n, D).

        The std reflects uncertainty about the transition function only;
        process noise is excluded.
        """
        X = self._check_states(X)
        f_mean, f_var = self._predictor.predict(X)
        mean = self.model_.next_state(X, f_mean)
        if not return_std:
            return mean
        std = np.zeros_like(mean)
        std[:, self.model_.gp_index] = np.sqrt(f_var)
        return mean, std

    def score(self, X, y):
        """Mean log density of next states ``y`` given states ``X``.

        The density includes the process noise on the GP-driven components.
        """
        X = self._check_states(X)
        y = self._check_states(y)
        if len(X) != len(y):
            raise InvalidArgumentError("X and y must have the same number of rows")
        f_mean, f_var = self._predictor.predict(X)
        _, ll = gaussian_metrics(f_mean, f_var + self.model_.process_noise,
                                 self.model_.gp_targets(y))
        return ll

    def transform(self, Y):
        """Smoothed posterior mean states (T + 1, D) for a series ``Y``.

        Row 0 is the initial state ``x_0``.
        """
        check_is_fitted(self, "state_")
        Y = check_array(Y, dtype=float, ensure_all_finite="allow-nan")
        if Y.shape[1] != self.n_features_in_:
            raise InvalidArgumentError(
                f"series has {Y.shape[1]} columns, expected {self.n_features_in_}")
        aux = build_auxiliary(self.model_, self.q_u_)
        traj = bootstrap_fixed_lag_smoother(aux, Y, self.n_particles, self.lag,
                                            self.random_state)
        return traj.mean()

    def rollout(self, x0, horizon, mode="mean", n_samples=1, seed=None):
        """Simulate the learned dynamics from ``x0``; see :func:`vgpssm.sparse.rollout`."""
        check_is_fitted(self, "state_")
        seed = self.random_state if seed is None else seed
        return rollout(self.q_u_, self.model_, x0, horizon, mode, seed, n_samples)
