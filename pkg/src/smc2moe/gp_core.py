"""Exact Gaussian-process experts.

Each expert is a constant-mean GP with an anisotropic squared-exponential
kernel whose diagonal carries the observation noise:

    Σ_ij = σ_ε² [i == j] + σ_f² ∏_d exp(-(x_id - x_jd)² / l_d²)

The noise term is keyed on observation index, not on coordinate equality, so
repeated inputs stay well posed.

Parameter vectors are laid out as ``[m, σ_ε, σ_f, l_1, ..., l_D]`` throughout
the package (``P = D + 3`` entries).  The numba kernels below are the only
place where covariance factorizations happen; everything else calls them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numba
import numba.np.linalg  # noqa: F401  (registers the LAPACK shim symbols)
import numpy as np
from numba import types

from .errors import NumericalSingularityError

LOG_2PI = float(np.log(2.0 * np.pi))

# Jitter is tried at 0 and then 1e-10 .. 1e-4 times the mean diagonal.
JITTER_LEVELS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)
_JITTER = np.array(JITTER_LEVELS)

IDX_MEAN, IDX_NOISE, IDX_SIGNAL, IDX_LENGTH = 0, 1, 2, 3


@dataclass(frozen=True)
class ExpertParams:
    """Constant mean, noise sd, signal sd and per-dimension length scales."""

    mean: float
    noise_sd: float
    signal_sd: float
    length_scales: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "length_scales", tuple(float(v) for v in self.length_scales))
        if self.noise_sd < 0 or self.signal_sd < 0:
            raise ValueError("noise_sd and signal_sd must be non-negative")
        if not self.length_scales or any(v <= 0 for v in self.length_scales):
            raise ValueError("length scales must be positive")

    @property
    def dim(self) -> int:
        return len(self.length_scales)

    def to_vector(self) -> np.ndarray:
        return np.array([self.mean, self.noise_sd, self.signal_sd, *self.length_scales])

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> "ExpertParams":
        v = np.asarray(v, dtype=float)
        return cls(float(v[0]), float(v[1]), float(v[2]), tuple(v[3:]))


@dataclass(frozen=True)
class DataSubset:
    """The rows of a dataset assigned to one expert."""

    X: np.ndarray
    y: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.size == 0:
            X = X.reshape(0, X.shape[-1] if X.ndim == 2 else 0)
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y have different lengths")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=np.int64).reshape(-1))

    def __len__(self):
        return self.y.shape[0]

    @classmethod
    def select(cls, X, Y, labels, k) -> "DataSubset":
        idx = np.flatnonzero(np.asarray(labels) == k)
        return cls(np.asarray(X)[idx], np.asarray(Y)[idx], idx)


class Prediction(NamedTuple):
    mean: float
    variance: float
    prior_only: bool


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _cov(Xa, Xb, theta, same_set):
    na, nb, D = Xa.shape[0], Xb.shape[0], Xa.shape[1]
    sf2 = theta[2] * theta[2]
    out = np.empty((na, nb))
    for i in range(na):
        for j in range(nb):
            r = 0.0
            for d in range(D):
                diff = Xa[i, d] - Xb[j, d]
                r += diff * diff / (theta[3 + d] * theta[3 + d])
            out[i, j] = sf2 * np.exp(-r)
    if same_set:
        ne2 = theta[1] * theta[1]
        for i in range(min(na, nb)):
            out[i, i] += ne2
    return out


# numba's own LAPACK shim, bound by symbol name so compiled code stays cacheable
_xxpotrf = types.ExternalFunction(
    "numba_xxpotrf", types.intc(types.char, types.char, types.intp, types.voidptr, types.intp)
)
_LAPACK_MIN = 64
# reassociation lets the dot-product loops vectorize; nan/inf semantics are kept
_FM = {"reassoc", "contract"}


@numba.njit(cache=True, fastmath=_FM)
def _chol_lower(A):
    """In-place lower Cholesky of a row-major symmetric matrix; returns 0 on success.

    Only the lower triangle is meaningful afterwards.  Small matrices use a
    direct loop; larger ones go through LAPACK.
    """
    n = A.shape[0]
    if n >= _LAPACK_MIN:
        # column-major 'U' on a row-major buffer is the row-major lower triangle
        return _xxpotrf(ord("d"), ord("U"), n, A.ctypes, n)
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= A[j, k] * A[j, k]
        if not (s > 0.0) or not np.isfinite(s):
            return j + 1
        d = np.sqrt(s)
        A[j, j] = d
        inv = 1.0 / d
        for i in range(j + 1, n):
            t = A[i, j]
            for k in range(j):
                t -= A[i, k] * A[j, k]
            A[i, j] = t * inv
    return 0


# exp(-r) for r >= 0 by range reduction and a degree-12 polynomial.  Unlike
# the libm call this vectorizes, and the covariance fill spends most of its
# time here.  Relative error stays below 1e-15; r beyond 700 saturates at
# exp(-700), far under any covariance entry that matters.
_LN2_HI = 6.93147180369123816490e-01
_LN2_LO = 1.90821492927058770002e-10
_INV_LN2 = 1.44269504088896338700e00
_MAGIC = 6755399441055744.0  # 1.5 * 2^52: adding it rounds to an integer
_MAGIC_BITS = int(np.array([_MAGIC]).view(np.int64)[0])


@numba.njit(cache=True, fastmath={"contract"})
def _exp_neg_poly(a, t):
    for i in range(a.shape[0]):
        x = -min(a[i], 700.0)
        tk = x * _INV_LN2 + _MAGIC
        k = tk - _MAGIC
        r = (x - k * _LN2_HI) - k * _LN2_LO
        a[i] = 1.0 + r * (1.0 + r * (0.5 + r * (1.0 / 6 + r * (1.0 / 24 + r * (1.0 / 120 + r * (
            1.0 / 720 + r * (1.0 / 5040 + r * (1.0 / 40320 + r * (1.0 / 362880 + r * (
                1.0 / 3628800 + r * (1.0 / 39916800 + r * (1.0 / 479001600))))))))))))
        t[i] = tk


@numba.njit(cache=True)
def _pow2_bits(tb):
    for i in range(tb.shape[0]):
        tb[i] = (tb[i] - _MAGIC_BITS + 1023) << 52


@numba.njit(cache=True)
def _scale_by(a, t):
    for i in range(a.shape[0]):
        a[i] *= t[i]


@numba.njit(cache=True)
def exp_neg(a):
    """In-place a <- exp(-a) for a 1-D array of non-negative values."""
    t = np.empty_like(a)
    _exp_neg_poly(a, t)
    _pow2_bits(t.view(np.int64))
    _scale_by(a, t)


@numba.njit(cache=True)
def _fill_cov(A, X, theta, extra):
    # lower triangle only: both factorization paths ignore the rest
    n, D = X.shape[0], X.shape[1]
    sf2 = theta[2] * theta[2]
    diag = sf2 + theta[1] * theta[1] + extra
    inv = np.empty(D)
    for d in range(D):
        inv[d] = 1.0 / (theta[3 + d] * theta[3 + d])
    buf = np.empty(n * (n - 1) // 2)
    c = 0
    for i in range(n):
        for j in range(i):
            r = 0.0
            for d in range(D):
                diff = X[i, d] - X[j, d]
                r += diff * diff * inv[d]
            buf[c] = r
            c += 1
    exp_neg(buf)
    c = 0
    for i in range(n):
        A[i, i] = diag
        for j in range(i):
            A[i, j] = sf2 * buf[c]
            c += 1


@numba.njit(cache=True)
def _factor(X, theta, jitter):
    """Cholesky factor of Σ(X, X; θ) with escalating jitter.

    Returns (L, level): level indexes ``jitter`` or is -1 when every level failed.
    """
    n = X.shape[0]
    A = np.empty((n, n))
    scale = theta[1] * theta[1] + theta[2] * theta[2]
    for lev in range(jitter.shape[0]):
        _fill_cov(A, X, theta, jitter[lev] * scale)
        if _chol_lower(A) == 0:
            ok = True
            for i in range(n):
                if not (A[i, i] > 0.0) or not np.isfinite(A[i, i]):
                    ok = False
                    break
            if ok:
                return A, lev
    return A, -1


@numba.njit(cache=True, fastmath=_FM)
def _forward(L, b):
    """Solve L z = b for lower-triangular L (lower triangle of a row-major array)."""
    n = b.shape[0]
    z = np.empty(n)
    for i in range(n):
        t = b[i]
        for k in range(i):
            t -= L[i, k] * z[k]
        z[i] = t / L[i, i]
    return z


@numba.njit(cache=True)
def _backward_t(L, z):
    """Solve L^T a = z."""
    n = z.shape[0]
    a = np.empty(n)
    for i in range(n - 1, -1, -1):
        t = z[i]
        for k in range(i + 1, n):
            t -= L[k, i] * a[k]
        a[i] = t / L[i, i]
    return a


@numba.njit(cache=True, fastmath=_FM)
def _loglik(X, y, theta, jitter):
    """log N(y | m 1, Σ); returns (value, jitter level) with level -1 on failure."""
    n = y.shape[0]
    if n == 0:
        return 0.0, 0
    L, lev = _factor(X, theta, jitter)
    if lev < 0:
        return -np.inf, -1
    quad = 0.0
    logdet = 0.0
    z = np.empty(n)
    for i in range(n):
        t = y[i] - theta[0]
        for k in range(i):
            t -= L[i, k] * z[k]
        z[i] = t / L[i, i]
        quad += z[i] * z[i]
        logdet += np.log(L[i, i])
    return -0.5 * quad - logdet - 0.5 * n * LOG_2PI, lev


@numba.njit(cache=True)
def _loglik_experts(X, Y, order, starts, theta, jitter, out, status):
    """Per-expert log marginal likelihoods for one parameter set.

    ``order[starts[k]:starts[k+1]]`` lists the rows allocated to expert k;
    ``theta`` is K x P.  Failed factorizations leave -inf in ``out`` and -1
    in ``status``.
    """
    K = theta.shape[0]
    for k in range(K):
        a, b = starts[k], starts[k + 1]
        if b == a:
            out[k] = 0.0
            status[k] = 0
            continue
        idx = order[a:b]
        out[k], status[k] = _loglik(X[idx], Y[idx], theta[k], jitter)


@numba.njit(cache=True)
def _loglik_one_expert(X, Y, order, starts, k, theta_k, jitter):
    a, b = starts[k], starts[k + 1]
    if b == a:
        return 0.0, 0
    idx = order[a:b]
    return _loglik(X[idx], Y[idx], theta_k, jitter)


@numba.njit(cache=True)
def _predict(Xs, X, y, theta, jitter):
    """Noisy-observation predictive moments at the rows of ``Xs``."""
    G = Xs.shape[0]
    n = y.shape[0]
    prior_var = theta[1] * theta[1] + theta[2] * theta[2]
    noise_var = theta[1] * theta[1]
    mean = np.full(G, theta[0])
    var = np.full(G, prior_var)
    if n == 0:
        return mean, var, 0
    L, lev = _factor(X, theta, jitter)
    if lev < 0:
        return mean, var, -1
    r = np.empty(n)
    for i in range(n):
        r[i] = y[i] - theta[0]
    alpha = _backward_t(L, _forward(L, r))
    Ks = _cov(Xs, X, theta, False)
    for g in range(G):
        ks = Ks[g]
        mu = theta[0]
        for i in range(n):
            mu += ks[i] * alpha[i]
        v = _forward(L, ks)
        vv = 0.0
        for i in range(n):
            vv += v[i] * v[i]
        s2 = prior_var - vv
        # floor at the noise variance: round-off can push the latent part below zero
        if s2 < noise_var:
            s2 = noise_var
        if s2 <= 0.0:
            s2 = 1e-300
        mean[g] = mu
        var[g] = s2
    return mean, var, lev


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def _as_points(X, D=None):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1) if D in (None, 1) else X.reshape(1, -1)
    if D is not None and X.shape[0] and X.shape[1] != D:
        raise ValueError(f"points have dimension {X.shape[1]}, expected {D}")
    return np.ascontiguousarray(X)


def _theta(params) -> np.ndarray:
    if isinstance(params, ExpertParams):
        return params.to_vector()
    return np.asarray(params, dtype=float)


def cov_matrix(X_a, X_b, theta, same_set: bool = False) -> np.ndarray:
    """Covariance between two point lists; noise added on the diagonal if ``same_set``."""
    th = _theta(theta)
    D = th.shape[0] - 3
    Xa = _as_points(X_a, D)
    Xb = _as_points(X_b, D)
    if Xa.shape[1] != D or Xb.shape[1] != D:
        raise ValueError("dimension mismatch between points and length scales")
    return _cov(Xa.reshape(-1, D), Xb.reshape(-1, D), th, bool(same_set))


def log_marginal_likelihood(data: DataSubset, theta) -> float:
    """log N(y | m, Σ) for the subset, via Cholesky with bounded jitter.

    Returns 0.0 for an empty subset.  Raises NumericalSingularityError when
    every jitter level fails.
    """
    th = _theta(theta)
    if len(data) == 0:
        return 0.0
    X = _as_points(data.X, th.shape[0] - 3)
    value, lev = _loglik(X, np.ascontiguousarray(data.y), th, _JITTER)
    if lev < 0:
        raise NumericalSingularityError(
            "covariance not positive definite after jitter escalation", JITTER_LEVELS[1:]
        )
    return float(value)


def gp_predict(x_star, data: DataSubset, theta) -> Prediction:
    """Predictive mean and variance of a noisy observation at ``x_star``.

    An empty subset returns the prior moments with ``prior_only`` set.
    """
    th = _theta(theta)
    D = th.shape[0] - 3
    xs = np.asarray(x_star, dtype=float).reshape(1, D)
    if len(data) == 0:
        return Prediction(float(th[0]), float(th[1] ** 2 + th[2] ** 2), True)
    mean, var, lev = _predict(xs, _as_points(data.X, D), np.ascontiguousarray(data.y), th, _JITTER)
    if lev < 0:
        raise NumericalSingularityError("predictive covariance not positive definite", JITTER_LEVELS[1:])
    return Prediction(float(mean[0]), float(var[0]), False)


def gp_predict_many(X_star, data: DataSubset, theta) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`gp_predict` over the rows of ``X_star``."""
    th = _theta(theta)
    D = th.shape[0] - 3
    Xs = _as_points(X_star, D)
    if len(data) == 0:
        G = Xs.shape[0]
        return np.full(G, th[0]), np.full(G, th[1] ** 2 + th[2] ** 2)
    mean, var, lev = _predict(Xs, _as_points(data.X, D), np.ascontiguousarray(data.y), th, _JITTER)
    if lev < 0:
        raise NumericalSingularityError("predictive covariance not positive definite", JITTER_LEVELS[1:])
    return mean, var


def partition_index(labels, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Sort row indices by label: returns ``(order, starts)`` with K+1 offsets."""
    labels = np.asarray(labels, dtype=np.int64)
    order = np.argsort(labels, kind="stable").astype(np.int64)
    counts = np.bincount(labels, minlength=K)
    starts = np.zeros(K + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])
    return order, starts


def expert_logliks(X, Y, labels, thetas) -> np.ndarray:
    """Log marginal likelihood of every expert under one allocation.

    ``thetas`` is K x P.  Failed factorizations raise NumericalSingularityError.
    """
    thetas = np.ascontiguousarray(thetas, dtype=float)
    K = thetas.shape[0]
    order, starts = partition_index(labels, K)
    out = np.empty(K)
    status = np.empty(K, dtype=np.int64)
    _loglik_experts(
        _as_points(X, thetas.shape[1] - 3), np.ascontiguousarray(Y, dtype=float),
        order, starts, thetas, _JITTER, out, status,
    )
    if np.any(status < 0):
        raise NumericalSingularityError("expert covariance not positive definite", JITTER_LEVELS[1:])
    return out
