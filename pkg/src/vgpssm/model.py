"""The GP state-space generative model.

A GP-SSM has a Gaussian-process prior over the transition function ``f``,
Gaussian process noise ``x_t ~ N(f(x_{t-1}), Q)``, a Gaussian prior on
``x_0`` and a parametric observation density ``p(y_t | x_t)``.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln

from .exceptions import ConfigurationError, InvalidArgumentError
from .kernels import KernelSpec, as_points, robust_factor

STRUCTURES = ("free", "second_order")
_LOG2PI = np.log(2.0 * np.pi)


def _vector(x, name, positive=False):
    x = np.atleast_1d(np.asarray(x, dtype=float)).copy()
    if x.ndim != 1 or not np.all(np.isfinite(x)):
        raise InvalidArgumentError(f"{name} must be a finite vector")
    if positive and np.any(x <= 0):
        raise InvalidArgumentError(f"{name} entries must be positive")
    x.setflags(write=False)
    return x


@dataclass(frozen=True)
class LikelihoodSpec:
    """Observation density ``p(y_t | x_t)``.

    Use the :meth:`gaussian` and :meth:`poisson` constructors.  Gaussian
    observations are ``y = C x + e`` with ``e ~ N(0, diag(noise_variance))``;
    ``C`` defaults to selecting the first ``E`` state components.  Poisson
    counts have rate ``exp(alpha * x[observed_state_index] + beta)``.
    """

    family: str = "gaussian"
    noise_variance: np.ndarray = None
    emission: np.ndarray = None
    alpha: np.ndarray = None
    beta: float = 0.0
    observed_state_index: int = 0

    def __post_init__(self):
        if self.family == "gaussian":
            R = _vector(self.noise_variance if self.noise_variance is not None else 1.0,
                        "noise_variance", positive=True)
            object.__setattr__(self, "noise_variance", R)
            if self.emission is not None:
                C = np.atleast_2d(np.asarray(self.emission, dtype=float)).copy()
                if C.shape[0] != R.size or not np.all(np.isfinite(C)):
                    raise InvalidArgumentError("emission must be a finite E x D matrix")
                C.setflags(write=False)
                object.__setattr__(self, "emission", C)
        elif self.family == "poisson":
            a = _vector(self.alpha if self.alpha is not None else 1.0, "alpha")
            object.__setattr__(self, "alpha", a)
            beta = float(self.beta)
            if not np.isfinite(beta):
                raise InvalidArgumentError("beta must be finite")
            object.__setattr__(self, "beta", beta)
            if int(self.observed_state_index) < 0:
                raise InvalidArgumentError("observed_state_index must be non-negative")
            object.__setattr__(self, "observed_state_index", int(self.observed_state_index))
        else:
            raise InvalidArgumentError(f"unknown likelihood family {self.family!r}")

    @classmethod
    def gaussian(cls, noise_variance, emission=None):
        return cls(family="gaussian", noise_variance=noise_variance, emission=emission)

    @classmethod
    def poisson(cls, alpha=1.0, beta=0.0, observed_state_index=0):
        return cls(family="poisson", alpha=alpha, beta=beta,
                   observed_state_index=observed_state_index)

    @property
    def obs_dim(self):
        if self.family == "gaussian":
            return self.noise_variance.size
        return self.alpha.size

    def emission_matrix(self, state_dim):
        if self.emission is not None:
            return np.asarray(self.emission)
        return np.eye(self.obs_dim, state_dim)

    def with_params(self, **kwargs):
        return replace(self, **kwargs)

    def validate_for(self, state_dim):
        if self.family == "gaussian":
            C = self.emission_matrix(state_dim)
            if C.shape != (self.obs_dim, state_dim):
                raise ConfigurationError(
                    f"emission has shape {C.shape}, expected ({self.obs_dim}, {state_dim})"
                )
            if self.emission is None and self.obs_dim > state_dim:
                raise ConfigurationError("more observed than latent dimensions needs an emission matrix")
        elif not 0 <= self.observed_state_index < state_dim:
            raise ConfigurationError(
                f"observed_state_index {self.observed_state_index} outside [0, {state_dim})"
            )

    def rate(self, X):
        """Poisson rates for states ``X`` of shape (L, D); shape (L, E)."""
        s = X[:, self.observed_state_index][:, None]
        return np.exp(self.alpha[None, :] * s + self.beta)

    def log_prob(self, y, X):
        """Log density of one observation ``y`` for each row of ``X``.

        Observations containing NaN carry no information and score zero.
        """
        X = np.atleast_2d(X)
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if np.any(np.isnan(y)):
            return np.zeros(X.shape[0])
        if self.family == "gaussian":
            C = self.emission_matrix(X.shape[1])
            R = self.noise_variance
            resid = y[None, :] - X @ C.T
            return -0.5 * np.sum(_LOG2PI + np.log(R) + resid**2 / R, axis=1)
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise InvalidArgumentError("Poisson observations must be non-negative integer counts")
        eta = self.alpha[None, :] * X[:, [self.observed_state_index]] + self.beta
        return np.sum(y * eta - np.exp(eta) - gammaln(y + 1.0), axis=1)

    def sample(self, rng, x):
        x = np.asarray(x, dtype=float)
        if self.family == "gaussian":
            C = self.emission_matrix(x.size)
            return C @ x + np.sqrt(self.noise_variance) * rng.standard_normal(self.obs_dim)
        return rng.poisson(self.rate(x[None, :])[0]).astype(float)


def log_likelihood(lik, y, x):
    """Exact log density (Gaussian) or log mass (Poisson) of ``y`` given ``x``."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if lik.family == "poisson" and np.any(y < 0):
        raise InvalidArgumentError("negative count")
    return float(lik.log_prob(y, np.atleast_1d(np.asarray(x, dtype=float))[None, :])[0])


@dataclass(frozen=True)
class GpssmModel:
    """Hyperparameters and inducing inputs of a GP-SSM.

    In ``"free"`` structure every state component is driven by its own
    GP output.  In ``"second_order"`` structure (D = 2) the first component
    integrates the second, ``x1' = x1 + dt * x2``, and a single GP output
    with process noise drives the second component.
    """

    kernel: KernelSpec
    process_noise: np.ndarray
    likelihood: LikelihoodSpec
    inducing_inputs: np.ndarray
    x0_mean: np.ndarray = None
    x0_var: np.ndarray = None
    structure: str = "free"
    dt: float = 1.0

    def __post_init__(self):
        Z = np.atleast_2d(np.asarray(self.inducing_inputs, dtype=float)).copy()
        if Z.shape[0] < 1 or not np.all(np.isfinite(Z)):
            raise ConfigurationError("need at least one finite inducing input")
        Z.setflags(write=False)
        object.__setattr__(self, "inducing_inputs", Z)
        D = Z.shape[1]
        if self.structure not in STRUCTURES:
            raise ConfigurationError(f"structure must be one of {STRUCTURES}")
        if self.structure == "second_order" and D != 2:
            raise ConfigurationError("second_order structure requires a 2-dimensional state")
        if self.kernel.input_dim != D:
            if self.kernel.input_dim == 1:
                object.__setattr__(
                    self, "kernel",
                    self.kernel.with_params(lengthscales=np.full(D, self.kernel.lengthscales[0])),
                )
            else:
                raise ConfigurationError("kernel lengthscales do not match the state dimension")
        n_out = D if self.structure == "free" else 1
        Q = _vector(self.process_noise, "process_noise", positive=True)
        if Q.size == 1 and n_out > 1:
            Q = _vector(np.full(n_out, Q[0]), "process_noise")
        if Q.size != n_out:
            raise ConfigurationError(f"process_noise needs {n_out} entries")
        object.__setattr__(self, "process_noise", Q)
        m0 = np.zeros(D) if self.x0_mean is None else self.x0_mean
        v0 = np.ones(D) if self.x0_var is None else self.x0_var
        object.__setattr__(self, "x0_mean", _vector(np.broadcast_to(m0, (D,)), "x0_mean"))
        object.__setattr__(self, "x0_var", _vector(np.broadcast_to(v0, (D,)), "x0_var", positive=True))
        if not np.isfinite(self.dt) or self.dt <= 0:
            raise ConfigurationError("dt must be positive")
        self.likelihood.validate_for(D)
        if Z.shape[0] > 1:
            scaled = Z / self.kernel.lengthscales
            sq = np.sum((scaled[:, None, :] - scaled[None, :, :]) ** 2, axis=-1)
            sq[np.diag_indices_from(sq)] = np.inf
            if np.sqrt(sq.min()) <= 1e-8:
                i, j = np.unravel_index(np.argmin(sq), sq.shape)
                raise ConfigurationError(f"inducing inputs {i} and {j} coincide")

    @property
    def state_dim(self):
        return self.inducing_inputs.shape[1]

    @property
    def n_inducing(self):
        return self.inducing_inputs.shape[0]

    @property
    def n_outputs(self):
        """Number of GP-driven state components."""
        return self.state_dim if self.structure == "free" else 1

    @property
    def gp_index(self):
        return np.arange(self.state_dim) if self.structure == "free" else np.array([1])

    def with_params(self, **kwargs):
        return replace(self, **kwargs)

    def gp_targets(self, X):
        """The GP-driven components of states ``X`` (L, D) -> (L, n_outputs)."""
        return np.asarray(X)[..., self.gp_index]

    def next_state(self, X_prev, F):
        """Vectorized :func:`apply_structure` for rows of ``X_prev`` and ``F``."""
        X_prev = np.asarray(X_prev, dtype=float)
        F = np.asarray(F, dtype=float)
        if self.structure == "free":
            return F.copy()
        out = np.empty(F.shape[:-1] + (2,))
        out[..., 0] = X_prev[..., 0] + self.dt * X_prev[..., 1]
        out[..., 1] = F[..., 0]
        return out


def apply_structure(model, x_t, f_sample):
    """Mean of the next state given the current state and a GP output."""
    x_t = np.asarray(x_t, dtype=float)
    f_sample = np.atleast_1d(np.asarray(f_sample, dtype=float))
    if model.structure == "second_order" and x_t.size != 2:
        raise ConfigurationError("second_order structure requires a 2-dimensional state")
    return model.next_state(x_t[None, :], f_sample[None, :])[0]


@dataclass(frozen=True)
class Trajectory:
    """Latent states ``x_0..x_T`` and observations ``y_1..y_T``."""

    states: np.ndarray
    observations: np.ndarray
    gp_outputs: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.states, dtype=float))
        Y = np.asarray(self.observations, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.shape[0] != Y.shape[0] + 1:
            raise InvalidArgumentError("need exactly one more state than observations")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise InvalidArgumentError("trajectory values must be finite")
        object.__setattr__(self, "states", X)
        object.__setattr__(self, "observations", Y)

    @property
    def T(self):
        return self.observations.shape[0]


def gp_predictive_conditional(model, f_history, x_history):
    """Predictive of ``f_t`` given earlier function values along the path.

    Parameters
    ----------
    f_history : array_like, shape (t-1, n_outputs)
        Function values ``f_1..f_{t-1}``.
    x_history : array_like, shape (t, D)
        States ``x_0..x_{t-1}``; the last row is the query input.

    Returns
    -------
    mean : ndarray, shape (n_outputs,)
    cov : ndarray, shape (n_outputs, n_outputs)
    """
    X = as_points(x_history, model.state_dim)
    F = np.asarray(f_history, dtype=float).reshape(-1, model.n_outputs)
    if F.shape[0] != X.shape[0] - 1:
        raise InvalidArgumentError("f_history must have one row fewer than x_history")
    x_star = X[-1:]
    k_ss = model.kernel(x_star)[0, 0]
    if F.shape[0] == 0:
        return np.zeros(model.n_outputs), k_ss * np.eye(model.n_outputs)
    H = X[:-1]
    fac = robust_factor(model.kernel(H))
    k_sh = model.kernel(x_star, H)[0]
    weights = fac.solve(k_sh)
    mean = weights @ F
    var = max(k_ss - k_sh @ weights, 0.0)
    return mean, var * np.eye(model.n_outputs)


def sample_prior_trajectory(model, T, seed=None):
    """Draw states and observations sequentially from the GP-SSM prior.

    Each ``f_t`` is drawn from the GP conditioned on every earlier
    ``(x_{s-1}, f_s)`` pair, so the cost grows as O(T^4) with naive
    refactorization; intended for T up to a few hundred.
    """
    T = int(T)
    if T < 1:
        raise InvalidArgumentError("T must be at least 1")
    rng = np.random.default_rng(seed)
    D, n_out = model.state_dim, model.n_outputs
    X = np.empty((T + 1, D))
    F = np.empty((T, n_out))
    Y = np.empty((T, model.likelihood.obs_dim))
    X[0] = model.x0_mean + np.sqrt(model.x0_var) * rng.standard_normal(D)
    q_std = np.sqrt(model.process_noise)
    for t in range(1, T + 1):
        mean, cov = gp_predictive_conditional(model, F[: t - 1], X[:t])
        F[t - 1] = mean + np.sqrt(np.diag(cov)) * rng.standard_normal(n_out)
        nxt = model.next_state(X[t - 1][None, :], F[t - 1][None, :])[0]
        nxt[model.gp_index] += q_std * rng.standard_normal(n_out)
        X[t] = nxt
        Y[t - 1] = model.likelihood.sample(rng, X[t])
    return Trajectory(X, Y, gp_outputs=F)
