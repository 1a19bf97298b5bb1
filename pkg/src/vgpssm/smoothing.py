"""Smoothing in the auxiliary Markovian state-space model.

For fixed ``q(u) = N(mu, Sigma)`` the optimal ``q(x)`` is the smoothing
distribution of a Markov model with transition ``N(x_t | A_{t-1} mu, Q)``
and a likelihood multiplied by
``exp(-1/2 tr(Q^{-1} (B_{t-1} + A_{t-1} Sigma A_{t-1}^T)))``.
"""

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .exceptions import ConfigurationError, DegenerateWeightsError, InvalidArgumentError, ResourceError
from .sparse import TransitionPredictor, inducing_factor

_LOG2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class AuxiliaryModel:
    """Markov model whose smoothing distribution is the optimal ``q(x)``.

    ``transition_mean`` maps previous states (L, D) to next-state means
    (L, D); components listed in ``noise_index`` receive Gaussian noise
    with variances ``noise_var``, the others are deterministic.
    """

    state_dim: int
    transition_mean: Callable
    noise_index: np.ndarray
    noise_var: np.ndarray
    extra_log_weight: Callable
    obs_log_density: Callable
    x0_mean: np.ndarray
    x0_var: np.ndarray

    @property
    def has_deterministic_part(self):
        return self.noise_index.size < self.state_dim

    def sample_x0(self, rng, n):
        return self.x0_mean + np.sqrt(self.x0_var) * rng.standard_normal((n, self.state_dim))

    def log_x0(self, X):
        return -0.5 * np.sum(_LOG2PI + np.log(self.x0_var)
                             + (X - self.x0_mean) ** 2 / self.x0_var, axis=-1)

    def sample_transition(self, rng, X):
        nxt = self.transition_mean(X)
        noise = rng.standard_normal((X.shape[0], self.noise_index.size))
        nxt[:, self.noise_index] += np.sqrt(self.noise_var) * noise
        return nxt

    def log_transition(self, X_next, X_prev):
        """Log density of the noisy components, evaluated row by row."""
        mean = self.transition_mean(X_prev)[:, self.noise_index]
        resid = X_next[:, self.noise_index] - mean
        v = self.noise_var
        return -0.5 * np.sum(_LOG2PI + np.log(v) + resid**2 / v, axis=1)


def build_auxiliary(model, q_u, factor=None):
    """Auxiliary model for ``model`` with inducing posterior ``q_u``."""
    fac = inducing_factor(model) if factor is None else factor
    predictor = TransitionPredictor(q_u, model, fac)
    qn = model.process_noise
    lik = model.likelihood

    def transition_mean(X):
        mean, _ = predictor.predict(X)
        return model.next_state(X, mean)

    def extra_log_weight(X):
        _, var = predictor.predict(X)
        return -0.5 * np.sum(var / qn, axis=1)

    def obs_log_density(y, X):
        return lik.log_prob(y, X)

    return AuxiliaryModel(
        state_dim=model.state_dim,
        transition_mean=transition_mean,
        noise_index=model.gp_index,
        noise_var=qn,
        extra_log_weight=extra_log_weight,
        obs_log_density=obs_log_density,
        x0_mean=model.x0_mean,
        x0_var=model.x0_var,
    )


@dataclass(frozen=True)
class ParticleTrajectories:
    """Weighted samples from ``q(x)`` over a window of S transitions.

    Attributes
    ----------
    states : ndarray, shape (S + 1, L, D)
        ``states[k]`` are samples of the state at window step ``k``.
    prev_states : ndarray, shape (S, L, D)
        ``prev_states[k - 1]`` is the predecessor of ``states[k]`` on the
        same particle path, so pairs are joint samples of
        ``(x_{k-1}, x_k)``.
    log_weights : ndarray, shape (S + 1, L)
        Normalized log weights; row 0 weights ``states[0]``, row ``k``
        weights the pair ``(prev_states[k-1], states[k])``.
    observations : ndarray, shape (S, E)
    includes_initial : bool
        Whether ``states[0]`` is the model's ``x_0``.
    log_normalizer : float
        Estimate of the log normalizer of the auxiliary model.
    entropy : float
        Estimate of ``H(q(x))`` for the window.
    """

    states: np.ndarray
    prev_states: np.ndarray
    log_weights: np.ndarray
    observations: np.ndarray
    ess: np.ndarray
    includes_initial: bool = True
    log_normalizer: float = 0.0
    entropy: float = 0.0
    lag: int = 0
    seed: object = None

    @property
    def n_steps(self):
        return self.prev_states.shape[0]

    @property
    def n_particles(self):
        return self.states.shape[1]

    @classmethod
    def from_states(cls, states, observations=None):
        """Point-mass ``q(x)`` on given states.

        ``states`` has shape (S + 1, D) for a single path or (S + 1, L, D)
        for L equally weighted paths.
        """
        X = np.asarray(states, dtype=float)
        if X.ndim == 2:
            X = X[:, None, :]
        if X.ndim != 3 or X.shape[0] < 1:
            raise InvalidArgumentError("states must have shape (S + 1, D) or (S + 1, L, D)")
        S, L = X.shape[0] - 1, X.shape[1]
        y = np.empty((S, 0)) if observations is None else np.asarray(observations, dtype=float)
        return cls(
            states=X,
            prev_states=X[:-1].copy(),
            log_weights=np.full((S + 1, L), -np.log(L)),
            observations=y,
            ess=np.full(S + 1, float(L)),
        )

    def weights(self, k):
        return np.exp(self.log_weights[k])

    def mean(self):
        """Weighted mean state per window step, shape (S + 1, D)."""
        W = np.exp(self.log_weights)
        return np.einsum("kl,kld->kd", W, self.states)


def _normalize(logw):
    top = np.max(logw)
    if not np.isfinite(top):
        return None, -np.inf
    lse = top + np.log(np.sum(np.exp(logw - top)))
    return logw - lse, lse


def ess_from_log_weights(logw):
    w = np.exp(logw - np.max(logw))
    w /= w.sum()
    return 1.0 / np.sum(w * w)


def systematic_resample(rng, weights):
    """Indices drawn by systematic resampling."""
    n = weights.size
    positions = (rng.uniform() + np.arange(n)) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.minimum(np.searchsorted(cum, positions, side="left"), n - 1)


def log_q_tilde_expectation(aux, traj):
    """Weighted expectation of the unnormalized log ``q*(x)`` over a window."""
    total = 0.0
    if traj.includes_initial:
        w0 = np.exp(traj.log_weights[0])
        total += float(w0 @ aux.log_x0(traj.states[0]))
    for k in range(1, traj.n_steps + 1):
        w = np.exp(traj.log_weights[k])
        nz = w > 0
        prev, cur = traj.prev_states[k - 1][nz], traj.states[k][nz]
        terms = (aux.log_transition(cur, prev) + aux.extra_log_weight(prev)
                 + aux.obs_log_density(traj.observations[k - 1], cur))
        total += float(w[nz] @ terms)
    return total


def bootstrap_fixed_lag_smoother(aux, y, n_particles=1000, lag=10, seed=None, burn_in=0,
                                 initial_particles=None, resample_threshold=0.5):
    """Bootstrap particle fixed-lag smoother on the auxiliary model.

    Particles are propagated through the auxiliary transition and weighted
    by the observation density times ``exp(extra_log_weight)``.  Systematic
    resampling runs whenever ESS < ``resample_threshold * n_particles``.
    The pair ``(x_{s-1}, x_s)`` is frozen ``lag`` steps after ``s``, using
    the ancestry and weights at time ``s + lag``; the final ``lag`` steps
    are frozen at the end of the series.

    Parameters
    ----------
    y : array_like, shape (T, E)
        Observations ``y_1..y_T``; NaN rows are treated as missing.
    burn_in : int
        Number of leading transitions that are filtered but not returned.
    initial_particles : array_like, shape (n_particles, D), optional
        Equally weighted particles for the starting state; drawn from the
        ``x_0`` prior when omitted.

    Raises
    ------
    DegenerateWeightsError
        If every particle gets zero weight at some time step.
    """
    n_particles, lag, burn_in = int(n_particles), int(lag), int(burn_in)
    if n_particles < 2:
        raise InvalidArgumentError("need at least 2 particles")
    if lag < 1:
        raise InvalidArgumentError("lag must be at least 1")
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    T = y.shape[0]
    if not 0 <= burn_in <= T:
        raise InvalidArgumentError("burn_in must lie in [0, T]")
    rng = np.random.default_rng(seed)
    L, D = n_particles, aux.state_dim
    S = T - burn_in

    states = np.empty((S + 1, L, D))
    prev_states = np.empty((S, L, D))
    log_w_out = np.empty((S + 1, L))
    ess_out = np.empty(S + 1)

    if initial_particles is None:
        X = aux.sample_x0(rng, L)
    else:
        X = np.array(initial_particles, dtype=float).reshape(L, D)
    logw = np.full(L, -np.log(L))
    window = [X]  # states at times t - len(window) + 1 .. t
    log_z = 0.0
    log_z_before = 0.0

    def freeze(s, t):
        # window[-1] is time t
        cur = window[len(window) - 1 - (t - s)]
        k = s - burn_in
        states[k] = cur
        log_w_out[k] = logw
        ess_out[k] = 1.0 / np.sum(np.exp(2 * logw))
        if k > 0:
            prev_states[k - 1] = window[len(window) - 2 - (t - s)]

    for t in range(1, T + 1):
        w = np.exp(logw)
        if 1.0 / np.sum(w * w) < resample_threshold * L:
            idx = systematic_resample(rng, w)
            window = [h[idx] for h in window]
            logw = np.full(L, -np.log(L))
        X_prev = window[-1]
        X = aux.sample_transition(rng, X_prev)
        inc = aux.extra_log_weight(X_prev) + aux.obs_log_density(y[t - 1], X)
        new_logw, lse = _normalize(logw + inc)
        if new_logw is None:
            raise DegenerateWeightsError(f"all particle weights vanished at t={t}", time_index=t)
        logw = new_logw
        log_z += lse
        if t == burn_in:
            log_z_before = log_z
        window.append(X)
        if len(window) > lag + 2:
            window.pop(0)
        s = t - lag
        if s >= burn_in:
            freeze(s, t)
    for s in range(max(burn_in, T - lag + 1), T + 1):
        freeze(s, T)

    traj = ParticleTrajectories(
        states=states,
        prev_states=prev_states,
        log_weights=log_w_out,
        observations=y[burn_in:],
        ess=ess_out,
        includes_initial=(burn_in == 0 and initial_particles is None),
        log_normalizer=float(log_z - log_z_before),
        lag=lag,
        seed=seed,
    )
    ent = traj.log_normalizer - log_q_tilde_expectation(aux, traj)
    return replace(traj, entropy=float(ent))


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid: ``n`` nodes per dimension on ``[lower, upper]``."""

    lower: tuple
    upper: tuple
    n: int

    def nodes(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        axes = [np.linspace(a, b, int(self.n)) for a, b in zip(lo, hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        cell = np.prod([(b - a) / (int(self.n) - 1) for a, b in zip(lo, hi)])
        return np.stack([m.ravel() for m in mesh], axis=1), float(cell)


@dataclass(frozen=True)
class GridSmoothing:
    """Exact forward-backward result on a discretized state space."""

    nodes: np.ndarray
    marginals: np.ndarray
    pair_marginals: np.ndarray
    log_normalizer: float
    observations: np.ndarray
    entropy: float

    def to_trajectories(self):
        """Represent the grid posterior as weighted node pairs."""
        G, D = self.nodes.shape
        T = self.pair_marginals.shape[0]
        with np.errstate(divide="ignore"):
            if T == 0:
                return ParticleTrajectories(
                    states=self.nodes[None], prev_states=np.zeros((0, G, D)),
                    log_weights=np.log(self.marginals), observations=self.observations,
                    ess=np.array([1.0 / np.sum(self.marginals[0] ** 2)]),
                    log_normalizer=self.log_normalizer, entropy=self.entropy)
            prev = np.repeat(self.nodes, G, axis=0)
            cur = np.tile(self.nodes, (G, 1))
            P = self.pair_marginals.reshape(T, G * G)
            logw = np.log(np.vstack([P[:1], P]))
        logw -= logsumexp(logw, axis=1, keepdims=True)
        W = np.exp(logw)
        return ParticleTrajectories(
            states=np.vstack([prev[None], np.repeat(cur[None], T, axis=0)]),
            prev_states=np.repeat(prev[None], T, axis=0),
            log_weights=logw,
            observations=self.observations,
            ess=1.0 / np.sum(W * W, axis=1),
            log_normalizer=self.log_normalizer,
            entropy=self.entropy,
        )


def grid_smoother(aux, y, grid, max_cells=10**7):
    """Forward-backward smoothing on a uniform grid (D <= 2).

    Integrals are replaced by Riemann sums over the grid, so results are
    exact up to discretization.  Intended as a test oracle.

    Raises
    ------
    ResourceError
        If ``nodes * T`` exceeds ``max_cells`` or the pairwise tables are
        too large.
    """
    if aux.state_dim > 2:
        raise InvalidArgumentError("grid smoothing supports at most 2 state dimensions")
    if aux.has_deterministic_part:
        raise ConfigurationError("grid smoothing needs a fully stochastic transition")
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    T = y.shape[0]
    nodes, cell = grid.nodes()
    G = nodes.shape[0]
    if G * max(T, 1) > max_cells or G * G * max(T, 1) > 5 * max_cells:
        raise ResourceError(f"grid of {G} nodes over {T} steps is too large")
    log_cell = np.log(cell)
    mean = aux.transition_mean(nodes)
    v = aux.noise_var
    logT = np.zeros((G, G))
    for j, d in enumerate(aux.noise_index):
        resid = nodes[None, :, d] - mean[:, None, d]
        logT += -0.5 * (_LOG2PI + np.log(v[j]) + resid**2 / v[j])
    logT += aux.extra_log_weight(nodes)[:, None] + log_cell
    obs = np.stack([aux.obs_log_density(y[t], nodes) for t in range(T)]) if T else np.zeros((0, G))

    log_alpha = np.empty((T + 1, G))
    log_alpha[0] = aux.log_x0(nodes) + log_cell
    for t in range(1, T + 1):
        log_alpha[t] = logsumexp(log_alpha[t - 1][:, None] + logT, axis=0) + obs[t - 1]
    log_z = float(logsumexp(log_alpha[T]))
    log_beta = np.zeros((T + 1, G))
    for t in range(T, 0, -1):
        log_beta[t - 1] = logsumexp(logT + (obs[t - 1] + log_beta[t])[None, :], axis=1)
    marg = np.exp(log_alpha + log_beta - log_z)
    marg /= marg.sum(axis=1, keepdims=True)
    pairs = np.empty((T, G, G))
    for t in range(1, T + 1):
        lp = log_alpha[t - 1][:, None] + logT + (obs[t - 1] + log_beta[t])[None, :] - log_z
        p = np.exp(lp)
        pairs[t - 1] = p / p.sum()

    # <log q~> under the grid posterior, in density units
    expected = float(marg[0] @ aux.log_x0(nodes))
    log_trans_density = logT - log_cell
    for t in range(1, T + 1):
        expected += float(np.sum(pairs[t - 1] * log_trans_density))
        expected += float(marg[t] @ obs[t - 1])
    return GridSmoothing(nodes, marg, pairs, log_z, y, log_z - expected)
