"""Variational sparse-GP core: inducing conditionals, q(u) and predictions.

Conventions: ``M`` inducing inputs ``Z`` (M, D) are shared by the
``n_outputs`` independent GP outputs.  For one input point ``x`` the
conditional ``p(f | x, u)`` is ``N(a(x) u_d, b(x))`` per output ``d``, where
``a(x) = k(x, Z) Kuu^{-1}`` and ``b(x) = k(x, x) - a(x) k(Z, x)``.  The
block operator acting on the stacked ``u`` is ``kron(I, a(x))``.
"""

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidArgumentError, SingularMatrixError
from .kernels import as_points, robust_factor

_LOG2PI = np.log(2.0 * np.pi)


def inducing_factor(model):
    """Robust Cholesky factor of ``Kuu`` for ``model``."""
    Z = model.inducing_inputs
    K = model.kernel(Z)
    try:
        return robust_factor(K)
    except SingularMatrixError as err:
        scaled = Z / model.kernel.lengthscales
        sq = np.sum((scaled[:, None, :] - scaled[None, :, :]) ** 2, axis=-1)
        sq[np.diag_indices_from(sq)] = np.inf
        i, j = np.unravel_index(np.argmin(sq), sq.shape)
        raise SingularMatrixError(
            f"Kuu is singular; closest inducing inputs are {i} and {j} "
            f"(scaled distance {np.sqrt(sq[i, j]):.3g})",
            jitter=err.jitter,
        ) from None


def _fsum(arr):
    """Exactly rounded sum over the first axis."""
    arr = np.asarray(arr, dtype=float)
    if arr.shape[0] == 0:
        return np.zeros(arr.shape[1:])
    flat = arr.reshape(arr.shape[0], -1)
    return np.array([math.fsum(col) for col in flat.T]).reshape(arr.shape[1:])


@dataclass(frozen=True)
class TransitionOperators:
    """Sparse conditional operators at a batch of inputs.

    Attributes
    ----------
    A : ndarray, shape (n, M)
        Rows ``k(x, Z) Kuu^{-1}``.
    B : ndarray, shape (n,)
        Conditional variances ``k(x, x) - k(x, Z) Kuu^{-1} k(Z, x)``.
    Kxu : ndarray, shape (n, M)
    """

    A: np.ndarray
    B: np.ndarray
    Kxu: np.ndarray

    def block(self, i=0, n_outputs=1):
        """Block forms ``(kron(I, a_i), b_i * I)`` acting on stacked ``u``."""
        eye = np.eye(n_outputs)
        return np.kron(eye, self.A[i][None, :]), self.B[i] * eye


def transition_operators(model, x_prev, factor=None):
    x = as_points(x_prev, model.state_dim)
    fac = inducing_factor(model) if factor is None else factor
    Kxu = model.kernel(x, model.inducing_inputs)
    A = fac.solve(Kxu.T).T
    B = np.maximum(model.kernel.diag(x) - np.sum(A * Kxu, axis=1), 0.0)
    return TransitionOperators(A, B, Kxu)


@dataclass(frozen=True)
class InducingPosterior:
    """Gaussian ``q(u)``, one independent factor per GP output.

    Natural parameters ``eta1`` (M, n) and ``eta2`` (n, M, M) are kept next
    to moments ``mu`` (M, n) and ``sigma`` (n, M, M) with ``mu = sigma eta1``
    and ``sigma = (-2 eta2)^{-1}``.
    """

    eta1: np.ndarray
    eta2: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def n_inducing(self):
        return self.eta1.shape[0]

    @property
    def n_outputs(self):
        return self.eta1.shape[1]

    @classmethod
    def from_natural(cls, eta1, eta2):
        eta1 = np.array(eta1, dtype=float)
        eta2 = np.array(eta2, dtype=float)
        if eta2.ndim == 2:
            eta2 = eta2[None]
        if eta1.ndim == 1:
            eta1 = eta1[:, None]
        n = eta2.shape[0]
        sigma = np.empty_like(eta2)
        mu = np.empty_like(eta1)
        for d in range(n):
            prec = -(eta2[d] + eta2[d].T)
            try:
                fac = robust_factor(prec)
            except SingularMatrixError as err:
                raise SingularMatrixError(
                    f"-2*eta2 is not positive definite for output {d}", jitter=err.jitter
                ) from None
            sigma[d] = fac.inverse()
            mu[:, d] = sigma[d] @ eta1[:, d]
            eta2[d] = 0.5 * (eta2[d] + eta2[d].T)
        return cls(eta1, eta2, mu, sigma)

    @classmethod
    def from_moments(cls, mu, sigma):
        mu = np.array(mu, dtype=float)
        sigma = np.array(sigma, dtype=float)
        if sigma.ndim == 2:
            sigma = sigma[None]
        if mu.ndim == 1:
            mu = mu[:, None]
        eta1 = np.empty_like(mu)
        eta2 = np.empty_like(sigma)
        for d in range(sigma.shape[0]):
            sigma[d] = 0.5 * (sigma[d] + sigma[d].T)
            fac = robust_factor(sigma[d])
            prec = fac.inverse()
            eta2[d] = -0.5 * prec
            eta1[:, d] = prec @ mu[:, d]
            mu[:, d] = sigma[d] @ eta1[:, d]
        return cls(eta1, eta2, mu, sigma)

    @classmethod
    def prior(cls, model, factor=None):
        """``q(u) = p(u) = N(0, Kuu)``."""
        fac = inducing_factor(model) if factor is None else factor
        M, n = model.n_inducing, model.n_outputs
        K = fac.matrix + fac.jitter_applied * np.eye(M)
        Kinv = fac.inverse()
        return cls(
            np.zeros((M, n)),
            np.repeat((-0.5 * Kinv)[None], n, axis=0),
            np.zeros((M, n)),
            np.repeat(K[None], n, axis=0),
        )

    def damped(self, target, rho):
        """Step ``rho`` of the way to ``target`` in natural-parameter space."""
        rho = float(rho)
        if not 0.0 < rho <= 1.0:
            raise InvalidArgumentError("step size rho must lie in (0, 1]")
        if rho == 1.0:
            return target
        return InducingPosterior.from_natural(
            self.eta1 + rho * (target.eta1 - self.eta1),
            self.eta2 + rho * (target.eta2 - self.eta2),
        )

    def consistency_error(self):
        err = 0.0
        for d in range(self.n_outputs):
            m = self.mu[:, d]
            err = max(err, np.linalg.norm(m - self.sigma[d] @ self.eta1[:, d])
                      / (1.0 + np.linalg.norm(m)))
        return err


@dataclass(frozen=True)
class SufficientStats:
    """Expected sufficient statistics of ``q(x)`` for the optimal ``q(u)``.

    ``psi1[:, d] = sum_t <k(x_{t-1}, Z)^T x_{t,d}>``,
    ``psi2 = sum_t <k(x_{t-1}, Z)^T k(x_{t-1}, Z)>``; ``x2[d]`` holds
    ``sum_t <x_{t,d}^2>`` and ``count`` the number of transitions.
    """

    psi1: np.ndarray
    psi2: np.ndarray
    x2: np.ndarray
    count: float

    @classmethod
    def zeros(cls, n_inducing, n_outputs):
        return cls(np.zeros((n_inducing, n_outputs)), np.zeros((n_inducing, n_inducing)),
                   np.zeros(n_outputs), 0.0)

    def __add__(self, other):
        return SufficientStats(self.psi1 + other.psi1, self.psi2 + other.psi2,
                               self.x2 + other.x2, self.count + other.count)

    def scaled(self, factor):
        return SufficientStats(factor * self.psi1, factor * self.psi2,
                               factor * self.x2, factor * self.count)


def _transition_weights(trajectories, tol=1e-8):
    W = np.exp(np.asarray(trajectories.log_weights[1:], dtype=float))
    sums = W.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > tol)
    if bad.size:
        raise InvalidArgumentError(
            f"weights at step {int(bad[0]) + 1} sum to {sums[bad[0]]:.12g}, not 1"
        )
    return W


def per_step_stats(model, trajectories):
    """Per-transition expectations ``(psi1_t, psi2_t, x2_t)`` as stacked arrays."""
    W = _transition_weights(trajectories)
    S, L = W.shape
    M = model.n_inducing
    if S == 0:
        n = model.n_outputs
        return np.zeros((0, M, n)), np.zeros((0, M, M)), np.zeros((0, n))
    prev = trajectories.prev_states.reshape(S * L, -1)
    Kxu = model.kernel(prev, model.inducing_inputs).reshape(S, L, M)
    target = model.gp_targets(trajectories.states[1:])
    WK = W[:, :, None] * Kxu
    psi1 = np.einsum("tlm,tld->tmd", WK, target)
    psi2 = np.einsum("tlm,tln->tmn", WK, Kxu)
    x2 = np.einsum("tl,tld->td", W, target**2)
    return psi1, psi2, x2


def accumulate_stats(model, trajectories):
    """Weighted Monte-Carlo sufficient statistics summed over the window.

    Raises
    ------
    InvalidArgumentError
        If the weights of some transition do not sum to one within 1e-8.
    """
    psi1, psi2, x2 = per_step_stats(model, trajectories)
    psi2 = _fsum(psi2)
    return SufficientStats(_fsum(psi1), 0.5 * (psi2 + psi2.T), _fsum(x2), float(psi1.shape[0]))


def optimal_qu(stats, model, prior=None, factor=None):
    """Optimal ``q(u)`` given sufficient statistics.

    ``eta1_d = Kuu^{-1} psi1_d / q_d`` and
    ``eta2_d = -1/2 (Kuu^{-1} + Kuu^{-1} psi2 Kuu^{-1} / q_d)``.
    With ``prior`` (an :class:`InducingPosterior`) its natural parameters
    replace those of ``p(u)``, which gives the online update.
    """
    fac = inducing_factor(model) if factor is None else factor
    M, n = model.n_inducing, model.n_outputs
    if stats.psi1.shape != (M, n) or stats.psi2.shape != (M, M):
        raise InvalidArgumentError("statistics do not match the model's M and outputs")
    Kinv = fac.inverse()
    base1 = np.zeros((M, n)) if prior is None else prior.eta1
    base2 = np.repeat((-0.5 * Kinv)[None], n, axis=0) if prior is None else prior.eta2
    q = model.process_noise
    eta1 = base1 + (Kinv @ stats.psi1) / q[None, :]
    KPK = Kinv @ stats.psi2 @ Kinv
    KPK = 0.5 * (KPK + KPK.T)
    eta2 = base2 - 0.5 * KPK[None] / q[:, None, None]
    return InducingPosterior.from_natural(eta1, eta2)


def optimal_qu_from_operators(model, trajectories, factor=None):
    """Natural parameters from ``<A^T x>`` and ``<A^T A>`` directly."""
    fac = inducing_factor(model) if factor is None else factor
    W = _transition_weights(trajectories)
    S, L = W.shape
    prev = trajectories.prev_states.reshape(S * L, -1)
    ops = transition_operators(model, prev, fac)
    A = ops.A.reshape(S, L, -1)
    target = model.gp_targets(trajectories.states[1:])
    WA = W[:, :, None] * A
    sum_ax = _fsum(np.einsum("tlm,tld->tmd", WA, target))
    sum_aa = _fsum(np.einsum("tlm,tln->tmn", WA, A))
    q = model.process_noise
    Kinv = fac.inverse()
    eta1 = sum_ax / q[None, :]
    eta2 = -0.5 * (Kinv[None] + 0.5 * (sum_aa + sum_aa.T)[None] / q[:, None, None])
    return eta1, eta2


def online_natural_update(q_u, stats, model, factor=None):
    """Fold new-segment statistics into ``q_u`` treated as the prior."""
    fac = inducing_factor(model) if factor is None else factor
    Kinv = fac.inverse()
    qn = model.process_noise
    eta1 = q_u.eta1 + (Kinv @ stats.psi1) / qn[None, :]
    KPK = Kinv @ stats.psi2 @ Kinv
    eta2 = q_u.eta2 - 0.5 * (0.5 * (KPK + KPK.T))[None] / qn[:, None, None]
    return InducingPosterior.from_natural(eta1, eta2)


def kl_qu_pu(q_u, model, factor=None):
    """``KL(q(u) || p(u))`` summed over outputs."""
    fac = inducing_factor(model) if factor is None else factor
    M = model.n_inducing
    logdet_k = fac.logdet()
    kl = 0.0
    for d in range(q_u.n_outputs):
        S = q_u.sigma[d]
        m = q_u.mu[:, d]
        sfac = robust_factor(0.5 * (S + S.T))
        trace = np.trace(fac.solve(S))
        maha = m @ fac.solve(m)
        kl += 0.5 * (trace + maha - M + logdet_k - sfac.logdet())
    return float(kl)


def phi(model, x_t, x_prev, u, factor=None):
    """Analytic inner integral ``int p(f_t | x_prev, u) log N(x_t | f_t, Q) df_t``.

    ``u`` is either a point value of shape (M, n_outputs) or an
    :class:`InducingPosterior`, in which case the expectation over ``q(u)``
    is returned.  Rows of ``x_t`` and ``x_prev`` are evaluated pairwise.
    """
    x_t = as_points(x_t, model.state_dim)
    ops = transition_operators(model, x_prev, factor)
    target = model.gp_targets(x_t)
    q = model.process_noise
    if isinstance(u, InducingPosterior):
        mean = ops.A @ u.mu
        spread = np.stack([np.sum((ops.A @ u.sigma[d]) * ops.A, axis=1)
                           for d in range(u.n_outputs)], axis=1)
    else:
        u = np.asarray(u, dtype=float).reshape(model.n_inducing, model.n_outputs)
        mean = ops.A @ u
        spread = 0.0
    total_b = ops.B[:, None] + spread
    val = -0.5 * np.sum(total_b / q + _LOG2PI + np.log(q) + (target - mean) ** 2 / q, axis=1)
    return val if val.size > 1 else float(val[0])


class TransitionPredictor:
    """Precomputed predictive ``N(A* mu, B* + A* Sigma A*^T)`` of ``f(x*)``.

    After construction each prediction costs O(M) for the mean and O(M^2)
    for the variance, independent of the training length.
    """

    def __init__(self, q_u, model, factor=None):
        fac = inducing_factor(model) if factor is None else factor
        Kinv = fac.inverse()
        self.model = model
        sv = model.kernel.signal_variance
        self._inv_ell = 1.0 / model.kernel.lengthscales
        self._Z = np.ascontiguousarray(model.inducing_inputs * self._inv_ell)
        self._z1 = self._Z[:, 0].copy() if model.state_dim == 1 else None
        self._c1 = float(self._inv_ell[0])
        self._alpha = Kinv @ q_u.mu
        self._C = np.stack([Kinv - Kinv @ q_u.sigma[d] @ Kinv for d in range(q_u.n_outputs)])
        # copies with the signal variance folded in, for predict_one
        self._alpha_s = sv * self._alpha
        self._C1_s = sv * sv * self._C[0] if q_u.n_outputs == 1 else None
        self._profile = model.kernel._profile
        self._sv = sv

    def predict(self, x_star):
        """Mean and variance arrays of shape (n, n_outputs)."""
        x = as_points(x_star, self.model.state_dim)
        k = self.model.kernel(x, self.model.inducing_inputs)
        mean = k @ self._alpha
        var = np.stack([self._sv - np.sum((k @ C) * k, axis=1) for C in self._C], axis=1)
        return mean, np.maximum(var, 0.0)

    def predict_one(self, x):
        """Single-point prediction without batch overhead."""
        if self._z1 is not None:
            x = x if isinstance(x, (float, np.floating)) else float(np.asarray(x).reshape(-1)[0])
            r = np.abs(self._z1 - x * self._c1)
        else:
            d = self._Z - np.asarray(x, dtype=float) * self._inv_ell
            r = np.sqrt(np.einsum("ij,ij->i", d, d))
        p = self._profile(r)
        mean = p @ self._alpha_s
        if self._C1_s is not None:
            var = self._sv - p @ (self._C1_s @ p)
            return mean, np.array([var if var > 0.0 else 0.0])
        k = self._sv * p
        var = self._sv - np.einsum("m,dmn,n->d", k, self._C, k)
        return mean, np.maximum(var, 0.0)


def predict_transition(q_u, model, x_star, factor=None):
    """Predictive mean and variance of the GP output at ``x_star``."""
    return TransitionPredictor(q_u, model, factor).predict(x_star)


ROLLOUT_MODES = ("mean", "noise_free", "sample_function_free")


@dataclass(frozen=True)
class RolloutSummary:
    """Simulated state paths of shape (n_samples, horizon + 1, D)."""

    paths: np.ndarray
    mode: str

    @property
    def mean(self):
        return self.paths.mean(axis=0)

    @property
    def std(self):
        return self.paths.std(axis=0)


def rollout(q_u, model, x0, horizon, mode="mean", seed=None, n_samples=1, factor=None):
    """Chain one-step predictions from ``x0`` without process noise.

    ``"mean"`` propagates predictive means.  ``"noise_free"`` draws one
    ``u ~ q(u)`` per sample path and then ``f* ~ p(f* | x*, u)`` at each
    step, so a path follows one posterior function sample.
    ``"sample_function_free"`` draws every ``f*`` independently from the
    marginal predictive, i.e. ``u`` is redrawn at each step.
    """
    if mode not in ROLLOUT_MODES:
        raise InvalidArgumentError(f"mode must be one of {ROLLOUT_MODES}")
    horizon = int(horizon)
    if horizon < 1:
        raise InvalidArgumentError("horizon must be at least 1")
    fac = inducing_factor(model) if factor is None else factor
    rng = np.random.default_rng(seed)
    D, n = model.state_dim, model.n_outputs
    if mode == "mean":
        n_samples = 1
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    paths = np.empty((n_samples, horizon + 1, D))
    paths[:, 0] = x0
    if mode == "noise_free":
        U = np.empty((n_samples, model.n_inducing, n))
        for d in range(n):
            chol = robust_factor(q_u.sigma[d]).factor
            U[:, :, d] = q_u.mu[:, d] + rng.standard_normal((n_samples, model.n_inducing)) @ chol.T
        for t in range(horizon):
            ops = transition_operators(model, paths[:, t], fac)
            f = np.einsum("sm,smd->sd", ops.A, U)
            f += np.sqrt(ops.B)[:, None] * rng.standard_normal((n_samples, n))
            paths[:, t + 1] = model.next_state(paths[:, t], f)
        return RolloutSummary(paths, mode)
    predictor = TransitionPredictor(q_u, model, fac)
    for t in range(horizon):
        mean, var = predictor.predict(paths[:, t])
        f = mean if mode == "mean" else mean + np.sqrt(var) * rng.standard_normal(mean.shape)
        paths[:, t + 1] = model.next_state(paths[:, t], f)
    return RolloutSummary(paths, mode)
