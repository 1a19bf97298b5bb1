"""Independent reference computations used by the tests.

Nothing here imports the package; each oracle is written from the
textbook formula so agreement is a real cross-check.
"""

import math

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

LOG2PI = math.log(2.0 * math.pi)


# -- kernels -------------------------------------------------------------------


def matern32(r, ell=1.0, sv=1.0):
    s = math.sqrt(3.0) * np.abs(r) / ell
    return sv * (1.0 + s) * np.exp(-s)


def matern52(r, ell=1.0, sv=1.0):
    s = math.sqrt(5.0) * np.abs(r) / ell
    return sv * (1.0 + s + s * s / 3.0) * np.exp(-s)


def se(r, ell=1.0, sv=1.0):
    return sv * np.exp(-0.5 * (np.asarray(r) / ell) ** 2)


def ard_kernel(family, a, b, ell, sv):
    """Scalar kernel between two points with ARD lengthscales."""
    r = math.sqrt(sum(((ai - bi) / li) ** 2 for ai, bi, li in zip(a, b, ell)))
    return float({"matern32": matern32, "matern52": matern52, "se": se}[family](r, 1.0, sv))


def dense_gram(family, X, Y, ell, sv):
    return np.array([[ard_kernel(family, x, y, ell, sv) for y in Y] for x in X])


# -- Gaussian densities ---------------------------------------------------------


def normal_logpdf(x, mean, var):
    return -0.5 * (LOG2PI + np.log(var) + (x - mean) ** 2 / var)


def mvn_logpdf(x, mean, cov):
    d = np.asarray(x) - np.asarray(mean)
    sign, logdet = np.linalg.slogdet(cov)
    assert sign > 0
    return -0.5 * (len(d) * LOG2PI + logdet + d @ np.linalg.solve(cov, d))


def gaussian_kl(m0, S0, m1, S1):
    """KL(N(m0, S0) || N(m1, S1))."""
    k = len(m0)
    S1inv = np.linalg.inv(S1)
    d = m1 - m0
    return 0.5 * (np.trace(S1inv @ S0) + d @ S1inv @ d - k
                  + np.linalg.slogdet(S1)[1] - np.linalg.slogdet(S0)[1])


def gh_expectation(fn, mean, var, n=80):
    """E[fn(x)] for x ~ N(mean, var) by Gauss-Hermite quadrature."""
    nodes, weights = hermegauss(n)
    x = mean + math.sqrt(var) * nodes
    return float(np.sum(weights * np.array([fn(v) for v in x])) / math.sqrt(2.0 * math.pi))


# -- linear-Gaussian state-space models ---------------------------------------------


def kalman_loglik(F, H, Qm, R, m0, P0, ys):
    """Log evidence of ``ys`` under x_t = F x_{t-1} + v, y_t = H x_t + e.

    ``x_0 ~ N(m0, P0)`` and the first observation is of ``x_1``.
    """
    m, P = np.asarray(m0, float), np.asarray(P0, float)
    ll = 0.0
    for y in ys:
        m = F @ m
        P = F @ P @ F.T + Qm
        S = H @ P @ H.T + R
        ll += mvn_logpdf(y, H @ m, S)
        K = P @ H.T @ np.linalg.inv(S)
        m = m + K @ (y - H @ m)
        P = P - K @ S @ K.T
    return ll


def rts_smoother(F, H, Qm, R, m0, P0, ys):
    """Smoothed means, covariances and lag-one cross-covariances.

    Returns arrays indexed by t = 0..T; ``cross[t]`` is
    Cov(x_t, x_{t-1} | y) for t >= 1.
    """
    T = len(ys)
    D = len(m0)
    mf = np.zeros((T + 1, D))
    Pf = np.zeros((T + 1, D, D))
    mp = np.zeros((T + 1, D))
    Pp = np.zeros((T + 1, D, D))
    mf[0], Pf[0] = m0, P0
    for t in range(1, T + 1):
        mp[t] = F @ mf[t - 1]
        Pp[t] = F @ Pf[t - 1] @ F.T + Qm
        S = H @ Pp[t] @ H.T + R
        K = Pp[t] @ H.T @ np.linalg.inv(S)
        mf[t] = mp[t] + K @ (ys[t - 1] - H @ mp[t])
        Pf[t] = Pp[t] - K @ S @ K.T
    ms, Ps = mf.copy(), Pf.copy()
    cross = np.zeros((T + 1, D, D))
    for t in range(T - 1, -1, -1):
        G = Pf[t] @ F.T @ np.linalg.inv(Pp[t + 1])
        ms[t] = mf[t] + G @ (ms[t + 1] - mp[t + 1])
        Ps[t] = Pf[t] + G @ (Ps[t + 1] - Pp[t + 1]) @ G.T
        cross[t + 1] = Ps[t + 1] @ G.T
    return ms, Ps, cross


def constant_drift_evidence(q, r, sv, ys, m0=0.0, v0=1.0):
    """Log evidence for x_t = c + v_t, y_t = x_t + e_t with c ~ N(0, sv).

    The unknown constant is carried as a second Kalman state.
    """
    F = np.array([[0.0, 1.0], [0.0, 1.0]])
    H = np.array([[1.0, 0.0]])
    Qm = np.diag([q, 0.0])
    return kalman_loglik(F, H, Qm, np.array([[r]]), np.array([m0, 0.0]),
                         np.diag([v0, sv]), [np.atleast_1d(y) for y in ys])


# -- sparse GP oracles -----------------------------------------------------------------


def dense_sparse_predictive(Kss, Ksu, Kuu, mu, Sigma):
    """Mean and variance of int p(f*|u) N(u|mu, Sigma) du by plain linear algebra."""
    A = np.linalg.solve(Kuu, Ksu.T).T
    mean = A @ mu
    var = Kss - A @ Ksu.T + A @ Sigma @ A.T
    return mean, var


def conjugate_regression_posterior(a_rows, targets, noise_var, prior_cov):
    """Posterior of w in targets = a_rows w + N(0, noise_var) with w ~ N(0, prior_cov)."""
    P = np.linalg.inv(prior_cov) + a_rows.T @ a_rows / noise_var
    cov = np.linalg.inv(P)
    mean = cov @ a_rows.T @ targets / noise_var
    return mean, cov
