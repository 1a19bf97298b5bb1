"""Stationary covariance functions and robust Cholesky factors.

Every kernel here is a scalar, stationary ARD kernel ``k(a, b)`` acting on
points in ``R^D``.  Multi-output covariances are built from it by the
independent-output convention: ``D`` scalar GPs share one kernel, so every
``D x D`` cross-covariance block is ``k(a, b) * I``.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from .exceptions import InvalidArgumentError, SingularMatrixError

FAMILIES = ("matern32", "matern52", "se")

_ALIASES = {
    "matern32": "matern32",
    "matern3/2": "matern32",
    "matern52": "matern52",
    "matern5/2": "matern52",
    "se": "se",
    "rbf": "se",
    "squaredexponential": "se",
    "squared_exponential": "se",
}

_SQRT3 = np.sqrt(3.0)
_SQRT5 = np.sqrt(5.0)


def _family(name):
    key = str(name).lower().replace("-", "").replace(" ", "")
    try:
        return _ALIASES[key]
    except KeyError:
        raise InvalidArgumentError(
            f"unknown kernel family {name!r}; expected one of {FAMILIES}"
        ) from None


def as_points(x, dim=None):
    """Return ``x`` as a finite float array of shape (n, D)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, 1) if dim in (None, 1) else x.reshape(1, -1)
    if x.ndim != 2:
        raise InvalidArgumentError(f"expected a 2-d array of points, got shape {x.shape}")
    if dim is not None and x.shape[1] != dim:
        raise InvalidArgumentError(f"points have dimension {x.shape[1]}, expected {dim}")
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("points must be finite")
    return x


@dataclass(frozen=True)
class KernelSpec:
    """A stationary ARD covariance function with zero mean.

    Parameters
    ----------
    family : str
        ``"matern32"``, ``"matern52"`` or ``"se"`` (squared exponential).
    lengthscales : array_like
        One positive lengthscale per input dimension.
    signal_variance : float
        Positive marginal variance ``k(a, a)``.
    """

    family: str = "matern32"
    lengthscales: np.ndarray = field(default_factory=lambda: np.ones(1))
    signal_variance: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "family", _family(self.family))
        ell = np.atleast_1d(np.asarray(self.lengthscales, dtype=float)).copy()
        if ell.ndim != 1 or not np.all(np.isfinite(ell)) or np.any(ell <= 0):
            raise InvalidArgumentError("lengthscales must be a vector of positive reals")
        ell.setflags(write=False)
        object.__setattr__(self, "lengthscales", ell)
        sv = float(self.signal_variance)
        if not np.isfinite(sv) or sv <= 0:
            raise InvalidArgumentError("signal_variance must be positive")
        object.__setattr__(self, "signal_variance", sv)

    @property
    def input_dim(self):
        return self.lengthscales.size

    def with_params(self, **kwargs):
        return replace(self, **kwargs)

    def _scaled(self, a, b):
        a = as_points(a, self.input_dim) / self.lengthscales
        b = as_points(b, self.input_dim) / self.lengthscales
        # per-dimension differences: exact at coincident points, O(n*m) memory
        sq = np.zeros((a.shape[0], b.shape[0]))
        for j in range(a.shape[1]):
            sq += np.subtract.outer(a[:, j], b[:, j]) ** 2
        return sq

    def _profile(self, r):
        if self.family == "se":
            return np.exp(-0.5 * r * r)
        if self.family == "matern32":
            s = _SQRT3 * r
            return (1.0 + s) * np.exp(-s)
        s = _SQRT5 * r
        return (1.0 + s + s * s / 3.0) * np.exp(-s)

    def _radial(self, r):
        # -(dk/dr) / r, finite at r = 0 for all three families
        if self.family == "se":
            return np.exp(-0.5 * r * r)
        if self.family == "matern32":
            return 3.0 * np.exp(-_SQRT3 * r)
        return (5.0 / 3.0) * (1.0 + _SQRT5 * r) * np.exp(-_SQRT5 * r)

    def __call__(self, a, b=None):
        """Scalar kernel matrix of shape (len(a), len(b))."""
        if b is None:
            b = a
        r = np.sqrt(self._scaled(a, b))
        return self.signal_variance * self._profile(r)

    def diag(self, a):
        return np.full(as_points(a, self.input_dim).shape[0], self.signal_variance)

    def radial_derivative(self, a, b=None):
        """Return ``h`` with ``dk(a, b)/da = -h * (a - b) / lengthscales**2``."""
        if b is None:
            b = a
        r = np.sqrt(self._scaled(a, b))
        return self.signal_variance * self._radial(r)


def eval_kernel(spec, a, b, n_outputs=None):
    """D x D cross-covariance block between two points.

    Under the independent-output convention this is ``k(a, b) * I``.
    ``n_outputs`` defaults to the input dimension.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InvalidArgumentError("kernel arguments must be finite")
    k = spec(a.reshape(1, -1), b.reshape(1, -1))[0, 0]
    n = a.size if n_outputs is None else int(n_outputs)
    return k * np.eye(n)


def kernel_matrix(spec, rows, cols, n_outputs=None):
    """Block kernel matrix of size (len(rows)*D, len(cols)*D).

    Block ``(i, j)`` equals ``eval_kernel(spec, rows[i], cols[j])``.
    """
    n = spec.input_dim if n_outputs is None else int(n_outputs)
    rows = np.asarray(rows, dtype=float).reshape(-1, spec.input_dim)
    cols = np.asarray(cols, dtype=float).reshape(-1, spec.input_dim)
    if rows.shape[0] == 0 or cols.shape[0] == 0:
        return np.zeros((rows.shape[0] * n, cols.shape[0] * n))
    return np.kron(spec(rows, cols), np.eye(n))


@dataclass(frozen=True)
class PsdMatrix:
    """A symmetric positive semi-definite matrix with its Cholesky factor.

    ``factor @ factor.T == matrix + jitter_applied * I``.
    """

    matrix: np.ndarray
    factor: np.ndarray
    jitter_applied: float = 0.0

    @property
    def size(self):
        return self.matrix.shape[0]

    def solve(self, b):
        return linalg.cho_solve((self.factor, True), b, check_finite=False)

    def inverse(self):
        inv = self.solve(np.eye(self.size))
        return 0.5 * (inv + inv.T)

    def logdet(self):
        return 2.0 * float(np.sum(np.log(np.diag(self.factor))))

    def half_solve(self, b):
        """Solve ``factor @ x = b``."""
        return linalg.solve_triangular(self.factor, b, lower=True, check_finite=False)


def robust_factor(m, min_rel_jitter=1e-10, max_rel_jitter=1e-4, growth=10.0):
    """Cholesky factor with geometric jitter escalation.

    A plain factorization is tried first.  On failure, jitter starting at
    ``min_rel_jitter * mean(diag)`` is added and multiplied by ``growth``
    until ``max_rel_jitter * mean(diag)`` is exceeded.

    Raises
    ------
    SingularMatrixError
        If the matrix still cannot be factorized at the largest jitter.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidArgumentError(f"expected a square matrix, got shape {m.shape}")
    n = m.shape[0]
    if n == 0:
        return PsdMatrix(m, np.zeros((0, 0)), 0.0)
    if not np.all(np.isfinite(m)):
        raise InvalidArgumentError("matrix has non-finite entries")
    scale = max(float(np.max(np.abs(m))), 1e-300)
    if np.max(np.abs(m - m.T)) > 1e-10 * scale:
        raise InvalidArgumentError("matrix is not symmetric")
    m = 0.5 * (m + m.T)
    mean_diag = float(np.mean(np.diag(m)))
    base = mean_diag if mean_diag > 0 else scale
    jitter = 0.0
    next_jitter = min_rel_jitter * base
    while True:
        try:
            factor = linalg.cholesky(m + jitter * np.eye(n), lower=True, check_finite=False)
            return PsdMatrix(m, factor, jitter)
        except linalg.LinAlgError:
            if next_jitter > max_rel_jitter * base * (1 + 1e-12):
                raise SingularMatrixError(
                    f"matrix is not positive definite even with jitter {jitter:.3g}",
                    jitter=jitter,
                ) from None
            jitter = next_jitter
            next_jitter *= growth
