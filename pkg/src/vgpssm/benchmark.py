"""Benchmark harness: the kink system, transition metrics, linear baseline."""

import hashlib
import json
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import InvalidArgumentError
from .model import Trajectory
from .sparse import TransitionPredictor

_LOG2PI = np.log(2.0 * np.pi)


def kink_transition(x):
    """``x + 1`` below 4 and ``-4 x + 21`` at or above 4."""
    x = np.asarray(x, dtype=float)
    return np.where(x < 4.0, x + 1.0, -4.0 * x + 21.0)


def kink_system_generate(T, seed=None, process_var=1.0, obs_var=1.0):
    """Simulate the kink system with unit process and observation noise.

    ``x_0 ~ N(0, 1)``, ``x_t ~ N(f(x_{t-1}), 1)``, ``y_t ~ N(x_t, 1)``.
    """
    T = int(T)
    if T < 1:
        raise InvalidArgumentError("T must be at least 1")
    rng = np.random.default_rng(seed)
    x = np.empty(T + 1)
    x[0] = rng.standard_normal()
    v = np.sqrt(process_var) * rng.standard_normal(T)
    for t in range(T):
        x[t + 1] = kink_transition(x[t]) + v[t]
    y = x[1:] + np.sqrt(obs_var) * rng.standard_normal(T)
    return Trajectory(x[:, None], y[:, None])


def transition_pairs(states):
    """Consecutive ``(x_t, x_{t+1})`` pairs of a state sequence."""
    X = np.asarray(states, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X[:-1], X[1:]


@dataclass
class BenchmarkReport:
    """Test metrics for one trained model."""

    test_rmse: float
    mean_pred_loglik: float
    train_time_s: float = 0.0
    test_time_s: float = 0.0
    config_fingerprint: str = ""
    seeds: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("test_rmse", "mean_pred_loglik", "train_time_s", "test_time_s"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise InvalidArgumentError(f"{name} is not finite")
            setattr(self, name, v)
        if self.train_time_s < 0 or self.test_time_s < 0:
            raise InvalidArgumentError("times must be non-negative")

    def to_dict(self):
        return asdict(self)


def gaussian_metrics(mean, var, target):
    """RMSE and mean log density of ``target`` under ``N(mean, var)``."""
    mean, var, target = (np.asarray(a, dtype=float) for a in (mean, var, target))
    if target.size == 0:
        raise InvalidArgumentError("empty test set")
    rmse = float(np.sqrt(np.mean(np.sum((target - mean) ** 2, axis=-1))))
    ll = -0.5 * np.sum(_LOG2PI + np.log(var) + (target - mean) ** 2 / var, axis=-1)
    return rmse, float(np.mean(ll))


def transition_metrics(q_u, model, test_pairs):
    """RMSE and mean ``log p(x_{t+1} | x_t)`` on held-out transitions.

    The predictive density of the next state is
    ``N(A* mu, B* + A* Sigma A*^T + Q)`` on the GP-driven components.

    Parameters
    ----------
    test_pairs : tuple of arrays
        ``(x_t, x_{t+1})``, each of shape (n, D).
    """
    x_t, x_next = (np.asarray(a, dtype=float) for a in test_pairs)
    if x_t.size == 0:
        raise InvalidArgumentError("empty test set")
    x_t = x_t.reshape(len(x_t), -1)
    x_next = x_next.reshape(len(x_next), -1)
    predictor = TransitionPredictor(q_u, model)
    mean, var = predictor.predict(x_t)
    target = model.gp_targets(x_next)
    return gaussian_metrics(mean, var + model.process_noise, target)


@dataclass(frozen=True)
class LinearARPredictor:
    """Least-squares linear autoregression with Gaussian residuals."""

    coef: np.ndarray  # (order * E, E)
    intercept: np.ndarray  # (E,)
    resid_var: np.ndarray  # (E,)
    order: int
    regularized: bool = False

    def predict(self, history):
        """Mean and variance of the next value; ``history`` (n, order * E)."""
        h = np.asarray(history, dtype=float).reshape(-1, self.coef.shape[0])
        mean = h @ self.coef + self.intercept
        return mean, np.broadcast_to(self.resid_var, mean.shape)

    def metrics(self, sequence):
        """One-step RMSE and mean log-likelihood along a sequence."""
        X = np.asarray(sequence, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        p = self.order
        hist = np.hstack([X[p - 1 - j: len(X) - 1 - j] for j in range(p)])
        mean, var = self.predict(hist)
        return gaussian_metrics(mean, var, X[p:])


def linear_baseline(train_obs, order=1, ridge=1e-8):
    """Fit a linear AR(order) model to an observation series.

    A rank-deficient design falls back to a ridge fit and sets
    ``regularized``.
    """
    Y = np.asarray(train_obs, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    order = int(order)
    T, E = Y.shape
    if order < 1 or T <= 10 * order:
        raise InvalidArgumentError("need order >= 1 and more than 10 * order observations")
    H = np.hstack([Y[order - 1 - j: T - 1 - j] for j in range(order)])
    target = Y[order:]
    design = np.hstack([H, np.ones((len(H), 1))])
    regularized = np.linalg.matrix_rank(design) < design.shape[1]
    if regularized:
        warnings.warn("rank-deficient AR design; using a ridge fit", RuntimeWarning)
        A = design.T @ design + ridge * max(1.0, np.trace(design.T @ design)) * np.eye(design.shape[1])
        beta = np.linalg.solve(A, design.T @ target)
    else:
        beta, *_ = np.linalg.lstsq(design, target, rcond=None)
    resid = target - design @ beta
    var = np.maximum(np.mean(resid**2, axis=0), 1e-12)
    return LinearARPredictor(beta[:-1], beta[-1], var, order, bool(regularized))


def config_fingerprint(config_dict):
    blob = json.dumps(config_dict, sort_keys=True, default=str).encode()
    return hashlib.sha1(blob).hexdigest()[:12]


def run_kink_benchmark(seed, T=500, n_test=10**4, config=None, n_inducing=15,
                       kernel="matern32", test_seed_offset=10_000):
    """Train on a simulated kink series and score held-out transitions.

    Test pairs come from the latent states of an independent simulation.
    Returns ``(report, state, baseline_rmse)``.
    """
    from .training import TrainingConfig, initialize_model, train

    config = config or TrainingConfig(seed=seed)
    data = kink_system_generate(T, seed=seed)
    test = kink_system_generate(n_test, seed=seed + test_seed_offset)
    init = initialize_model(data.observations, 1, n_inducing, kernel)
    t0 = time.perf_counter()
    state = train(data.observations, config, init=init)
    train_time = time.perf_counter() - t0
    pairs = transition_pairs(test.states)
    t0 = time.perf_counter()
    rmse, ll = transition_metrics(state.q_u, state.model, pairs)
    test_time = time.perf_counter() - t0
    baseline = linear_baseline(data.observations, order=1)
    base_rmse, _ = baseline.metrics(test.states)
    report = BenchmarkReport(rmse, ll, train_time, test_time,
                             config_fingerprint(asdict(config)), [seed, seed + test_seed_offset])
    return report, state, base_rmse
