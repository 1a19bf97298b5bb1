"""Hybrid VB/SMC training: batch, stochastic (segment) and online modes.

One iteration samples a window of the series, smooths it in the auxiliary
model, takes a damped natural-parameter step towards the optimal ``q(u)``
and a gradient-ascent step on the hyperparameters.
"""

import hashlib
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln

from .exceptions import (
    ConfigurationError,
    DegenerateWeightsError,
    InvalidArgumentError,
    NumericalError,
    SingularMatrixError,
)
from .kernels import KernelSpec
from .model import GpssmModel, LikelihoodSpec
from .smoothing import (
    GridSpec,
    bootstrap_fixed_lag_smoother,
    build_auxiliary,
    grid_smoother,
)
from .sparse import (
    InducingPosterior,
    accumulate_stats,
    inducing_factor,
    kl_qu_pu,
    online_natural_update,
    optimal_qu,
)

logger = logging.getLogger(__name__)

_LOG2PI = np.log(2.0 * np.pi)
MODES = ("batch", "svi", "online")
THETA_GROUPS = ("lengthscales", "signal_variance", "process_noise", "likelihood", "inducing_inputs")


@dataclass(frozen=True)
class PowerSchedule:
    """Step sizes ``scale * (offset + i) ** -exponent`` for i = 0, 1, ..."""

    scale: float = 1.0
    offset: float = 1.0
    exponent: float = 0.7

    def __call__(self, i):
        return self.scale * (self.offset + i) ** (-self.exponent)

    @property
    def robbins_monro(self):
        return 0.5 < self.exponent <= 1.0


@dataclass(frozen=True)
class TrainingConfig:
    """Settings for :func:`train`.

    With ``optimizer="sgd"`` the ``lam`` steps apply to the gradient of the
    ELBO divided by the number of transitions in the full series.  With
    ``"adam"`` the gradient is rescaled elementwise by running moment
    estimates, so ``lam`` is roughly the per-iteration change of each
    unconstrained hyperparameter (log scale for positive ones).
    """

    mode: str = "batch"
    n_particles: int = 1000
    lag: int = 10
    segment_length: int = None
    segments_per_iter: int = 1
    rho: PowerSchedule = PowerSchedule(1.0, 1.0, 0.7)
    lam: PowerSchedule = PowerSchedule(0.3, 1.0, 0.51)
    optimizer: str = "adam"
    max_iters: int = 150
    min_iters: int = 20
    tol: float = 1e-4
    window: int = 5
    seed: int = 0
    learn: tuple = THETA_GROUPS
    smoother: str = "particle"
    grid: GridSpec = None
    preliminary_pass: bool = True
    max_step: float = 0.5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")
        if self.n_particles < 2 or self.lag < 1:
            raise ConfigurationError("need n_particles >= 2 and lag >= 1")
        if self.mode == "svi":
            if self.segment_length is None or self.segment_length < 1:
                raise ConfigurationError("svi mode needs a positive segment_length")
            if not self.rho.robbins_monro:
                raise ConfigurationError("svi step sizes need an exponent in (0.5, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError("optimizer must be 'adam' or 'sgd'")
        if self.smoother not in ("particle", "grid"):
            raise ConfigurationError("smoother must be 'particle' or 'grid'")
        if self.smoother == "grid" and self.grid is None:
            raise ConfigurationError("grid smoother needs a grid spec")
        unknown = set(self.learn) - set(THETA_GROUPS)
        if unknown:
            raise ConfigurationError(f"unknown hyperparameter groups {sorted(unknown)}")


@dataclass
class TrainingState:
    """Current model, ``q(u)`` and bookkeeping of a training run."""

    model: GpssmModel
    q_u: InducingPosterior
    iteration: int = 0
    elbo_trace: list = field(default_factory=list)
    ess_trace: list = field(default_factory=list)
    rng_state: dict = None
    filter_particles: np.ndarray = None
    converged: bool = False
    optimizer_state: dict = None


# -- hyperparameter packing ----------------------------------------------------


def pack_theta(model):
    """Unconstrained hyperparameters as an ordered dict of arrays."""
    lik = model.likelihood
    theta = {
        "log_lengthscales": np.log(model.kernel.lengthscales),
        "log_signal_variance": np.array([np.log(model.kernel.signal_variance)]),
        "log_process_noise": np.log(model.process_noise),
    }
    if lik.family == "gaussian":
        theta["log_noise_variance"] = np.log(lik.noise_variance)
    else:
        theta["alpha"] = np.array(lik.alpha)
        theta["beta"] = np.array([lik.beta])
    theta["inducing_inputs"] = np.array(model.inducing_inputs)
    return theta


def unpack_theta(model, theta):
    lik = model.likelihood
    if lik.family == "gaussian":
        lik = lik.with_params(noise_variance=np.exp(theta["log_noise_variance"]))
    else:
        lik = lik.with_params(alpha=theta["alpha"], beta=float(theta["beta"][0]))
    kernel = model.kernel.with_params(
        lengthscales=np.exp(theta["log_lengthscales"]),
        signal_variance=float(np.exp(theta["log_signal_variance"][0])),
    )
    return model.with_params(
        kernel=kernel,
        process_noise=np.exp(theta["log_process_noise"]),
        likelihood=lik,
        inducing_inputs=theta["inducing_inputs"],
    )


_GROUP_OF = {
    "log_lengthscales": "lengthscales",
    "log_signal_variance": "signal_variance",
    "log_process_noise": "process_noise",
    "log_noise_variance": "likelihood",
    "alpha": "likelihood",
    "beta": "likelihood",
    "inducing_inputs": "inducing_inputs",
}


def theta_digest(model):
    h = hashlib.sha1()
    for v in pack_theta(model).values():
        h.update(np.ascontiguousarray(v, dtype=float).tobytes())
    return h.hexdigest()[:12]


# -- objective and gradient ------------------------------------------------------


def _checked_weights(traj, tol=1e-8):
    W = np.exp(np.asarray(traj.log_weights, dtype=float))
    sums = W.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > tol):
        raise InvalidArgumentError("trajectory weights are not normalized")
    return W


def _objective(model, q_u, traj, data_scale=1.0, grad=False, chunk=200_000):
    """Data terms of the ELBO and, optionally, their gradient.

    Returns ``(value, grads)`` where ``value`` excludes the entropy of
    ``q(x)``; ``grads`` maps packed hyperparameter names to arrays.
    """
    fac = inducing_factor(model)
    Winv = fac.inverse()
    kern = model.kernel
    Z = model.inducing_inputs
    ell2 = kern.lengthscales**2
    sv = kern.signal_variance
    q = model.process_noise
    lik = model.likelihood
    M, n_out, D = model.n_inducing, model.n_outputs, model.state_dim
    mu = q_u.mu
    Sq = np.einsum("dmn,d->mn", q_u.sigma, 1.0 / q)
    c = float(np.sum(1.0 / q))

    Wts = _checked_weights(traj)
    S_steps, L = traj.n_steps, traj.n_particles

    value = 0.0
    if traj.includes_initial:
        X0 = traj.states[0]
        lp0 = -0.5 * np.sum(_LOG2PI + np.log(model.x0_var)
                            + (X0 - model.x0_mean) ** 2 / model.x0_var, axis=1)
        value += float(Wts[0] @ lp0)

    g_lenl = np.zeros(D)
    g_z = np.zeros((M, D))
    g_q = np.zeros(n_out)
    g_sv = 0.0
    psi2 = np.zeros((M, M))
    R1 = np.zeros((M, n_out))
    trans_val = 0.0
    obs_val = 0.0
    g_lik = {}
    if lik.family == "gaussian":
        g_lik["log_noise_variance"] = np.zeros(lik.obs_dim)
        C = lik.emission_matrix(D)
    else:
        g_lik["alpha"] = np.zeros(lik.obs_dim)
        g_lik["beta"] = np.zeros(1)

    prev_all = traj.prev_states.reshape(S_steps * L, D)
    cur_all = traj.states[1:].reshape(S_steps * L, D)
    w_all = Wts[1:].reshape(-1)
    obs_all = np.repeat(np.asarray(traj.observations, dtype=float), L, axis=0) if S_steps else None
    total_w = 0.0
    for lo in range(0, S_steps * L, chunk):
        hi = min(lo + chunk, S_steps * L)
        w = w_all[lo:hi]
        keep = w > 0
        if not np.any(keep):
            continue
        w = w[keep]
        prev, cur, yv = prev_all[lo:hi][keep], cur_all[lo:hi][keep], obs_all[lo:hi][keep]
        total_w += w.sum()
        Kxu = kern(prev, Z)
        A = Kxu @ Winv
        target = model.gp_targets(cur)
        resid = target - A @ mu
        spread = np.stack([np.sum((A @ q_u.sigma[d]) * A, axis=1) for d in range(n_out)], axis=1)
        B = sv - np.sum(A * Kxu, axis=1)
        E = B[:, None] + spread + resid**2
        trans_val += float(w @ np.sum(-0.5 * E / q - 0.5 * (_LOG2PI + np.log(q)), axis=1))

        # observation terms
        if lik.family == "gaussian":
            r = yv - cur @ C.T
            Rv = lik.noise_variance
            nan = np.isnan(r)
            r = np.where(nan, 0.0, r)
            lp = -0.5 * (_LOG2PI + np.log(Rv) + r**2 / Rv)
            lp = np.where(nan, 0.0, lp)
            obs_val += float(w @ lp.sum(axis=1))
            if grad:
                g_lik["log_noise_variance"] += w @ np.where(nan, 0.0, 0.5 * r**2 / Rv - 0.5)
        else:
            nan = np.isnan(yv)
            yz = np.where(nan, 0.0, yv)
            s = cur[:, [lik.observed_state_index]]
            eta = lik.alpha[None, :] * s + lik.beta
            lam = np.exp(eta)
            lp = np.where(nan, 0.0, yz * eta - lam - gammaln(yz + 1.0))
            obs_val += float(w @ lp.sum(axis=1))
            if grad:
                dlam = np.where(nan, 0.0, yz - lam)
                g_lik["alpha"] += w @ (dlam * s)
                g_lik["beta"] += np.array([w @ dlam.sum(axis=1)])

        if not grad:
            continue
        wk = w[:, None] * Kxu
        psi2 += wk.T @ Kxu
        R1 += (w[:, None] * Kxu).T @ (resid / q)
        g_q += w @ (0.5 * E / q - 0.5)
        g_sv += -0.5 * c * sv * w.sum()
        # d(term)/d(Kxu), rows
        Gk = (c * Kxu - A @ Sq + (resid / q) @ mu.T) @ Winv
        Gk *= w[:, None]
        g_sv += float(np.sum(Gk * Kxu))
        H = kern.radial_derivative(prev, Z)
        GH = Gk * H
        for j in range(D):
            diff = prev[:, j][:, None] - Z[None, :, j]
            g_lenl[j] += np.sum(GH * diff**2) / ell2[j]
            g_z[:, j] += np.sum(GH * diff, axis=0) / ell2[j]

    value += data_scale * (trans_val + obs_val)
    kl = kl_qu_pu(q_u, model, fac)
    value -= kl
    if not grad:
        return value, None

    # gradient through Kuu: data part via W = Kuu^{-1}, then the KL
    G_W = 0.5 * c * psi2 - 0.5 * (psi2 @ Winv @ Sq + Sq @ Winv @ psi2) + R1 @ mu.T
    G_W = 0.5 * (G_W + G_W.T)
    moment = np.einsum("dmn->mn", q_u.sigma) + mu @ mu.T
    G_K = -data_scale * (Winv @ G_W @ Winv) + 0.5 * Winv @ moment @ Winv - 0.5 * n_out * Winv
    Kuu = kern(Z)
    Huu = kern.radial_derivative(Z)
    GKH = G_K * Huu
    g_sv_total = data_scale * g_sv + float(np.sum(G_K * Kuu))
    g_lenl_total = data_scale * g_lenl
    g_z_total = data_scale * g_z
    for j in range(D):
        diff = Z[:, j][:, None] - Z[None, :, j]
        g_lenl_total[j] += np.sum(GKH * diff**2) / ell2[j]
        # d/dz_m of sum_i G_K[m, i] k(z_m, z_i) counted twice by symmetry
        g_z_total[:, j] += 2.0 * np.sum(GKH * (-diff), axis=1) / ell2[j]

    grads = {
        "log_lengthscales": g_lenl_total,
        "log_signal_variance": np.array([g_sv_total]),
        "log_process_noise": data_scale * g_q,
    }
    for k, v in g_lik.items():
        grads[k] = data_scale * v
    grads["inducing_inputs"] = g_z_total
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}", parameter=name)
    return value, grads


def elbo_estimate(model, q_u, trajectories, data_scale=1.0):
    """Monte-Carlo ELBO estimate for samples of ``q(x)``.

    The entropy of ``q(x)`` is taken from ``trajectories.entropy``, which
    the smoothers compute as the log normalizer of the auxiliary model
    minus the expected unnormalized log density.  When the samples come
    from the optimal ``q(x)`` for ``(model, q_u)`` this equals the
    auxiliary log normalizer minus ``KL(q(u) || p(u))``.
    """
    value, _ = _objective(model, q_u, trajectories, data_scale)
    return value + trajectories.entropy


def theta_gradient(model, q_u, trajectories, data_scale=1.0):
    """Gradient of :func:`elbo_estimate` with samples and ``q(u)`` held fixed.

    Keys follow :func:`pack_theta`: log lengthscales, log signal variance,
    log process noise, likelihood parameters (log noise variance, or
    ``alpha`` and ``beta``) and inducing inputs.

    Raises
    ------
    NumericalError
        If any gradient entry is not finite.
    """
    _, grads = _objective(model, q_u, trajectories, data_scale, grad=True)
    return grads


def apply_gradient(model, grads, step, learn=THETA_GROUPS, max_step=None):
    """Gradient-ascent step in unconstrained hyperparameter space.

    Each update is clipped elementwise to ``max_step``; the step is halved
    up to ten times if it produces an invalid model.
    """
    theta = pack_theta(model)
    for _ in range(10):
        new = {}
        for name, value in theta.items():
            if _GROUP_OF[name] in learn and name in grads:
                delta = step * grads[name]
                if max_step is not None:
                    delta = np.clip(delta, -max_step, max_step)
                new[name] = value + delta
            else:
                new[name] = value
        try:
            candidate = unpack_theta(model, new)
            inducing_factor(candidate)
            return candidate
        except (ConfigurationError, InvalidArgumentError, SingularMatrixError):
            step *= 0.5
    logger.warning("hyperparameter step rejected; keeping previous values")
    return model


def adam_direction(grads, opt_state, beta1=0.9, beta2=0.999, eps=1e-8):
    """Moment-rescaled ascent direction; returns ``(direction, new_state)``."""
    opt_state = opt_state or {"t": 0, "m": {}, "v": {}}
    t = opt_state["t"] + 1
    m, v, direction = {}, {}, {}
    for name, g in grads.items():
        m[name] = beta1 * opt_state["m"].get(name, 0.0) + (1 - beta1) * g
        v[name] = beta2 * opt_state["v"].get(name, 0.0) + (1 - beta2) * g * g
        m_hat = m[name] / (1 - beta1**t)
        v_hat = v[name] / (1 - beta2**t)
        direction[name] = m_hat / (np.sqrt(v_hat) + eps)
    return direction, {"t": t, "m": m, "v": v}


# -- statistics for stochastic and online modes ---------------------------------


def svi_stats(model, segment_trajectories, T_total, S):
    """Segment statistics scaled by ``T / S`` (unbiased up to edge effects)."""
    if S > T_total:
        raise InvalidArgumentError("segment length exceeds the series length")
    if S < 1:
        raise InvalidArgumentError("segment length must be positive")
    return accumulate_stats(model, segment_trajectories).scaled(T_total / S)


def segment_coverage(T, S):
    """Number of length-``S`` segments containing each transition 1..T."""
    if not 1 <= S <= T:
        raise InvalidArgumentError("need 1 <= S <= T")
    t = np.arange(1, T + 1)
    n_starts = T - S + 1
    return np.minimum(t, S) - np.maximum(0, t - n_starts)


def svi_edge_multipliers(T, S):
    """Expected multiplier of each transition's statistics under SVI.

    Averaging the ``T / S``-scaled statistics of all ``T - S + 1``
    segments weights transition ``t`` by ``T c_t / (S (T - S + 1))``, with
    ``c_t`` the number of segments covering it.  Interior transitions get
    ``T / (T - S + 1)`` and the ``S - 1`` transitions at either end get
    less; the multipliers sum to ``T``.
    """
    return T * segment_coverage(T, S) / (S * (T - S + 1))


# -- initialization ------------------------------------------------------------------


def _grid_points(lower, upper, M):
    lower, upper = np.atleast_1d(lower), np.atleast_1d(upper)
    D = lower.size
    if D == 1:
        return np.linspace(lower[0], upper[0], M)[:, None]
    n = int(np.ceil(M ** (1.0 / D)))
    axes = [np.linspace(a, b, n) for a, b in zip(lower, upper)]
    mesh = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
    pick = np.unique(np.round(np.linspace(0, len(mesh) - 1, M)).astype(int))
    return mesh[pick]


def initialize_model(y, state_dim=1, n_inducing=15, kernel="matern32", likelihood="gaussian",
                     structure="free", dt=1.0):
    """Scale-matched starting hyperparameters for a series ``y``.

    Gaussian likelihood: lengthscales are the per-dimension observation
    standard deviation, the signal variance is the variance of first
    differences, ``Q`` is 0.1 and ``R`` 1.0 times the data variance.
    Inducing inputs are spread over the observed range.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    E = y.shape[1]
    D = int(state_dim)
    n_out = D if structure == "free" else 1
    finite = y[np.all(np.isfinite(y), axis=1)]
    if likelihood == "gaussian":
        var = np.var(finite, axis=0)
        std = np.sqrt(np.maximum(var, 1e-12))
        ell = np.ones(D) * float(np.mean(std))
        ell[: min(D, E)] = std[: min(D, E)]
        dvar = float(np.mean(np.var(np.diff(finite, axis=0), axis=0)))
        lo = np.full(D, -2.0 * float(np.mean(std)))
        hi = -lo
        lo[: min(D, E)] = finite.min(axis=0)[: min(D, E)]
        hi[: min(D, E)] = finite.max(axis=0)[: min(D, E)]
        lik = LikelihoodSpec.gaussian(var.copy())
        q0 = 0.1 * float(np.mean(var))
        sv = max(dvar, 1e-6)
    elif likelihood == "poisson":
        rate = max(float(np.mean(finite)), 1e-3)
        lik = LikelihoodSpec.poisson(alpha=np.ones(E), beta=np.log(rate),
                                     observed_state_index=1 if structure == "second_order" else 0)
        ell = np.ones(D)
        lo, hi = np.full(D, -2.0), np.full(D, 2.0)
        q0, sv = 0.1, 1.0
    else:
        raise ConfigurationError(f"unknown likelihood {likelihood!r}")
    Z = _grid_points(lo, hi, int(n_inducing))
    return GpssmModel(
        kernel=KernelSpec(kernel, ell, sv),
        process_noise=np.full(n_out, q0),
        likelihood=lik,
        inducing_inputs=Z,
        structure=structure,
        dt=dt,
    )


def place_inducing_from_states(model, trajectories, lower_q=0.02, upper_q=0.98):
    """Respread inducing inputs over the range of smoothed states."""
    W = np.exp(trajectories.log_weights[1:]).ravel()
    X = trajectories.states[1:].reshape(-1, model.state_dim)
    lo, hi = [], []
    for j in range(model.state_dim):
        order = np.argsort(X[:, j])
        cw = np.cumsum(W[order])
        cw /= cw[-1]
        lo.append(X[order[np.searchsorted(cw, lower_q)], j])
        hi.append(X[order[min(np.searchsorted(cw, upper_q), len(order) - 1)], j])
    return model.with_params(inducing_inputs=_grid_points(np.array(lo), np.array(hi), model.n_inducing))


# -- training loop -----------------------------------------------------------------


def _smooth(model, q_u, y, config, seed, burn_in=0, initial_particles=None):
    aux = build_auxiliary(model, q_u)
    if config.smoother == "grid":
        return grid_smoother(aux, y, config.grid).to_trajectories()
    n = config.n_particles
    try:
        return bootstrap_fixed_lag_smoother(aux, y, n, config.lag, seed, burn_in, initial_particles)
    except DegenerateWeightsError:
        logger.warning("degenerate particle weights; retrying with %d particles", 4 * n)
        if initial_particles is not None:
            initial_particles = np.repeat(initial_particles, 4, axis=0)
        return bootstrap_fixed_lag_smoother(aux, y, 4 * n, config.lag, seed, burn_in,
                                            initial_particles)


def _validate_series(y):
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2:
        raise InvalidArgumentError("observations must be a (T, E) array")
    if not np.all(np.isfinite(y)):
        raise InvalidArgumentError("observations must be finite")
    return y


def _converged(trace, window, tol):
    if len(trace) < 2 * window:
        return False
    cur = np.mean(trace[-window:])
    prev = np.mean(trace[-2 * window:-window])
    return abs(cur - prev) <= tol * max(abs(prev), 1.0)


def train(y, config=None, init=None, q_init=None, state=None, callback=None):
    """Fit a GP-SSM to observations ``y`` of shape (T, E).

    Parameters
    ----------
    config : TrainingConfig
    init : GpssmModel, optional
        Starting hyperparameters; :func:`initialize_model` is used if absent.
    q_init : InducingPosterior, optional
        Starting ``q(u)``; defaults to the prior.
    state : TrainingState, optional
        Resume from a previous run; ``init`` and ``q_init`` are ignored.
    callback : callable, optional
        Called with a progress record dict after every iteration.
    """
    config = config or TrainingConfig()
    y = _validate_series(y)
    T = y.shape[0]
    if T < 2:
        raise InvalidArgumentError("need at least 2 observations")
    if config.mode == "online":
        raise ConfigurationError("use online_update for online mode")
    S = T if config.mode == "batch" else int(config.segment_length)
    if S > T:
        raise InvalidArgumentError("segment length exceeds the series length")

    if state is None:
        model = init if init is not None else initialize_model(y, state_dim=1)
        rng = np.random.default_rng(config.seed)
        if q_init is None and config.preliminary_pass and init is None:
            q0 = InducingPosterior.prior(model)
            pre = _smooth(model, q0, y[: min(T, 500)], config, int(rng.integers(2**63)))
            model = place_inducing_from_states(model, pre)
        q_u = q_init if q_init is not None else InducingPosterior.prior(model)
        state = TrainingState(model=model, q_u=q_u, rng_state=rng.bit_generator.state)
    else:
        state = replace(state, elbo_trace=list(state.elbo_trace), ess_trace=list(state.ess_trace))
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state

    while state.iteration < config.max_iters:
        i = state.iteration
        model, q_u = state.model, state.q_u
        stats_total = None
        grads_total = None
        elbo = 0.0
        ess_min = np.inf
        n_seg = 1 if config.mode == "batch" else config.segments_per_iter
        for _ in range(n_seg):
            seed = int(rng.integers(2**63))
            if config.mode == "batch":
                traj = _smooth(model, q_u, y, config, seed)
                scale = 1.0
            else:
                tau = int(rng.integers(1, T - S + 2))  # first transition of the segment
                start = max(0, tau - 1 - config.lag)
                traj = _smooth(model, q_u, y[start: tau - 1 + S], config, seed,
                               burn_in=tau - 1 - start)
                scale = T / (S * n_seg)
            value, grads = _objective(model, q_u, traj, scale, grad=bool(config.learn))
            elbo += value + traj.entropy
            ess_min = min(ess_min, float(np.min(traj.ess)))
            stats = accumulate_stats(model, traj).scaled(scale)
            stats_total = stats if stats_total is None else stats_total + stats
            if grads is not None:
                grads_total = grads if grads_total is None else {
                    k: grads_total[k] + grads[k] for k in grads}
        q_star = optimal_qu(stats_total, model)
        state.q_u = q_u.damped(q_star, config.rho(i))
        if grads_total is not None:
            grads_total = {k: g for k, g in grads_total.items() if _GROUP_OF[k] in config.learn}
            if config.optimizer == "adam":
                direction, state.optimizer_state = adam_direction(grads_total,
                                                                  state.optimizer_state)
                step = config.lam(i)
            else:
                direction, step = grads_total, config.lam(i) / T
            state.model = apply_gradient(model, direction, step, config.learn, config.max_step)
        state.iteration = i + 1
        state.elbo_trace.append(float(elbo))
        state.ess_trace.append(ess_min)
        state.rng_state = rng.bit_generator.state
        if callback is not None:
            callback({"iter": state.iteration, "elbo": float(elbo), "ess_min": ess_min,
                      "theta_digest": theta_digest(state.model)})
        if state.iteration >= config.min_iters and _converged(state.elbo_trace, config.window,
                                                              config.tol):
            state.converged = True
            break
    return state


def online_update(state, new_observations, config=None, trajectories=None):
    """Fold a new segment of observations into ``q(u)``.

    ``q(u)`` from ``state`` acts as the prior; only the new segment is
    smoothed, starting from the particles left by the previous update (or
    the ``x_0`` prior).  Hyperparameters are not changed.  Passing
    ``trajectories`` replaces smoothing with fixed samples of ``q(x)``.
    """
    config = config or TrainingConfig(mode="online")
    y = np.asarray(new_observations, dtype=float)
    if y.size == 0:
        return state
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[1] != state.model.likelihood.obs_dim:
        raise InvalidArgumentError(
            f"segment has {y.shape[1]} columns, model expects {state.model.likelihood.obs_dim}")
    rng = np.random.default_rng()
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state
    else:
        rng = np.random.default_rng(config.seed)
    if trajectories is None:
        trajectories = _smooth(state.model, state.q_u, y, config, int(rng.integers(2**63)),
                               initial_particles=state.filter_particles)
    stats = accumulate_stats(state.model, trajectories)
    q_new = online_natural_update(state.q_u, stats, state.model)
    w = np.exp(trajectories.log_weights[-1])
    idx = rng.choice(w.size, size=config.n_particles, p=w / w.sum())
    return replace(
        state,
        q_u=q_new,
        filter_particles=trajectories.states[-1][idx],
        rng_state=rng.bit_generator.state,
        elbo_trace=list(state.elbo_trace),
        ess_trace=list(state.ess_trace),
    )
