"""Compound predictive densities over an (x*, y*) grid.

The density at a cell mixes Gaussian predictives over inner members,
experts and outer particles:

    p(y* | x*) = Σ_j w_j Σ_k p_k(x* | Ψ_j) Σ_m ω_m N(y* | E_kjm(x*), V_kjm(x*)).

Each term is formed in log space, so tiny mixture weights never underflow
before they are combined; terms below e^-50 of a cell's scale are skipped.
IS particles contribute their single MAP parameter set per expert.

A component narrower than two y* spacings is stored as its mass per
trapezoid cell (cell average) rather than its point value: point values of
an under-resolved Gaussian alias, and their trapezoid sum can exceed one.
With cell averages the trapezoid sum is exactly the mass inside the grid.
Resolved components keep point values; their aliasing error is below 1e-30.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from scipy.special import logsumexp

from .gating_prior import log_kernels
from .errors import NumericalSingularityError
from .gp_core import _JITTER, _as_points, _predict

DEFAULT_NX = 200
DEFAULT_NY = 4000
Y_PAD_SDS = 3.0
_SKIP = 50.0


@dataclass
class PredictiveGrid:
    x_grid: np.ndarray  # G x D
    y_grid: np.ndarray  # Ny
    density: np.ndarray  # G x Ny
    mean: np.ndarray  # G

    def mass(self) -> np.ndarray:
        """Per-x* trapezoidal integral over y."""
        return np.trapezoid(self.density, self.y_grid, axis=1)


def default_x_grid(D: int = 1, n: int = DEFAULT_NX, dim: int = 0) -> np.ndarray:
    """n points on [0, 1] along ``dim``; other coordinates fixed at 0.5."""
    X = np.full((n, D), 0.5)
    X[:, dim] = np.linspace(0.0, 1.0, n)
    return X


def default_y_grid(Y, n: int = DEFAULT_NY, pad_sds: float = Y_PAD_SDS) -> np.ndarray:
    """Data range padded by ``pad_sds`` sample sds on each side."""
    Y = np.asarray(Y, dtype=float)
    sd = float(np.std(Y, ddof=1)) if Y.size > 1 else 1.0
    if not sd > 0:
        sd = 1.0
    return np.linspace(Y.min() - pad_sds * sd, Y.max() + pad_sds * sd, n)


# ---------------------------------------------------------------------------
# mixture components
# ---------------------------------------------------------------------------


def _atoms(sample):
    """Group identical particles: yields (weight, labels, psi, thetas M x K x P)."""
    groups: dict = {}
    order = []
    w = np.asarray(sample.weights, dtype=float)
    for wj, p in zip(w, sample.particles):
        if wj <= 0:
            continue
        theta = p.ens.theta if hasattr(p, "ens") else p.thetas[None]
        key = (p.labels.tobytes(), p.psi.log_weights.tobytes(), p.psi.means.tobytes(),
               p.psi.sds.tobytes(), theta.tobytes())
        if key in groups:
            groups[key][0] += wj
        else:
            groups[key] = [wj, p.labels, p.psi, theta]
            order.append(key)
    return [groups[k] for k in order]


def mixture_components(sample, X, Y, x_grid):
    """Log-weights, means and variances of every Gaussian component, each C x G."""
    X = _as_points(X)
    Y = np.ascontiguousarray(Y, dtype=float).reshape(-1)
    Xs = _as_points(x_grid, X.shape[1])
    G = Xs.shape[0]
    lw, mu, var = [], [], []
    for wj, labels, psi, theta in _atoms(sample):
        lk = log_kernels(Xs, psi)
        lg = lk - logsumexp(lk, axis=1, keepdims=True)  # G x K
        M, K = theta.shape[0], theta.shape[1]
        for k in range(K):
            idx = np.flatnonzero(labels == k)
            Xk = np.ascontiguousarray(X[idx])
            yk = np.ascontiguousarray(Y[idx])
            members: dict = {}
            for m in range(M):
                key = theta[m, k].tobytes()
                members[key] = members.get(key, 0) + 1
            for key, count in members.items():
                th = np.frombuffer(key, dtype=float)
                mean, v, lev = _predict(Xs, Xk, yk, th, _JITTER)
                if lev < 0:
                    raise NumericalSingularityError("predictive covariance not positive definite",
                                                    tuple(_JITTER[1:]))
                lw.append(math.log(wj) + math.log(count / M) + lg[:, k])
                mu.append(mean)
                var.append(v)
    if not lw:
        return np.empty((0, G)), np.empty((0, G)), np.empty((0, G))
    return np.array(lw), np.array(mu), np.array(var)


_RESOLVED = 2.0  # point values for sd >= _RESOLVED * max spacing


def cell_edges(y) -> np.ndarray:
    """Edges of the cells the trapezoid rule assigns to each y* node."""
    y = np.asarray(y, dtype=float)
    return np.concatenate([[y[0]], 0.5 * (y[1:] + y[:-1]), [y[-1]]])


@numba.njit(cache=True)
def _std_mass(lo, hi):
    # P(lo < Z < hi) for standard normal Z, without cancellation in the tails
    r = 1.0 / math.sqrt(2.0)
    if lo >= 0.0:
        return 0.5 * (math.erfc(lo * r) - math.erfc(hi * r))
    if hi <= 0.0:
        return 0.5 * (math.erfc(-hi * r) - math.erfc(-lo * r))
    return 1.0 - 0.5 * math.erfc(-lo * r) - 0.5 * math.erfc(hi * r)


@numba.njit(cache=True)
def _accumulate(lw, mu, var, y, edges, out):
    C, G = lw.shape
    ny = y.shape[0]
    hmax = 0.0
    for i in range(ny - 1):
        hmax = max(hmax, y[i + 1] - y[i])
    half_log_2pi = 0.5 * math.log(2.0 * math.pi)
    for g in range(G):
        top = -np.inf
        for c in range(C):
            if lw[c, g] > top:
                top = lw[c, g]
        for c in range(C):
            a = lw[c, g]
            if a < top - _SKIP:
                continue
            v = var[c, g]
            sd = math.sqrt(v)
            m = mu[c, g]
            lnorm = a - half_log_2pi - 0.5 * math.log(v)
            reach = sd * math.sqrt(2.0 * (_SKIP + max(0.0, lnorm - (top - _SKIP))))
            lo = np.searchsorted(y, m - reach - hmax)
            hi = min(np.searchsorted(y, m + reach + hmax, side="right"), ny)
            if sd >= _RESOLVED * hmax:
                for i in range(lo, hi):
                    d = y[i] - m
                    out[g, i] += math.exp(lnorm - 0.5 * d * d / v)
            else:
                w = math.exp(a)
                for i in range(lo, hi):
                    width = edges[i + 1] - edges[i]
                    mass = _std_mass((edges[i] - m) / sd, (edges[i + 1] - m) / sd)
                    out[g, i] += w * mass / width


def grid_density(lw, mu, var, y_grid) -> np.ndarray:
    """Mixture density on the y* grid from C x G component log-weights, means, variances."""
    y = np.ascontiguousarray(y_grid, dtype=float)
    out = np.zeros((lw.shape[1], y.size))
    _accumulate(np.ascontiguousarray(lw, dtype=float), np.ascontiguousarray(mu, dtype=float),
                np.ascontiguousarray(var, dtype=float), y, cell_edges(y), out)
    return out


def predictive_density(sample, X, Y, x_grid=None, y_grid=None) -> PredictiveGrid:
    """Mixture predictive density and exact mean over the grid.

    ``sample`` is a :class:`~smc2moe.smc2_engine.PosteriorSample` or an
    :class:`~smc2moe.is_baseline.ISResult`; ``(X, Y)`` is the normalized
    training data the particles were fitted to.
    """
    X = _as_points(X)
    x_grid = default_x_grid(X.shape[1]) if x_grid is None else _as_points(x_grid, X.shape[1])
    y_grid = default_y_grid(Y) if y_grid is None else np.asarray(y_grid, dtype=float)
    if y_grid.ndim != 1 or y_grid.size < 2 or np.any(np.diff(y_grid) <= 0):
        raise ValueError("y_grid must be strictly increasing with at least two points")
    lw, mu, var = mixture_components(sample, X, Y, x_grid)
    if lw.shape[0] == 0:
        raise ValueError("particle set is empty")
    dens = grid_density(lw, mu, var, y_grid)
    mean = np.sum(np.exp(lw) * mu, axis=0)
    return PredictiveGrid(x_grid, y_grid, dens, mean)


def predictive_mean(sample, X, Y, x_grid=None) -> np.ndarray:
    """First moment of the predictive mixture, computed from component means."""
    X = _as_points(X)
    x_grid = default_x_grid(X.shape[1]) if x_grid is None else _as_points(x_grid, X.shape[1])
    lw, mu, _ = mixture_components(sample, X, Y, x_grid)
    return np.sum(np.exp(lw) * mu, axis=0)


def _crossing(y, cum, level):
    i = int(np.searchsorted(cum, level, side="left"))
    if i == 0:
        return y[0]
    if i >= cum.size:
        return y[-1]
    frac = (level - cum[i - 1]) / (cum[i] - cum[i - 1])
    return y[i - 1] + frac * (y[i] - y[i - 1])


def grid_median(y_grid, density, rtol: float = 1e-9) -> np.ndarray:
    """Per row: y where cumulative trapezoidal mass reaches half the total.

    When the half-mass level sits on a flat stretch of the cumulative (a gap
    between modes), the median is not unique; the midpoint of the crossings
    of half -/+ ``rtol`` x total is returned.
    """
    y = np.asarray(y_grid, dtype=float)
    dens = np.atleast_2d(np.asarray(density, dtype=float))
    out = np.empty(dens.shape[0])
    for g, row in enumerate(dens):
        cells = 0.5 * (row[1:] + row[:-1]) * np.diff(y)
        cum = np.concatenate([[0.0], np.cumsum(cells)])
        total = cum[-1]
        if not total > 0:
            raise ValueError(f"zero predictive mass at grid row {g}")
        half, tol = 0.5 * total, rtol * total
        out[g] = 0.5 * (_crossing(y, cum, half - tol) + _crossing(y, cum, half + tol))
    return out


def predictive_median(grid: PredictiveGrid) -> np.ndarray:
    return grid_median(grid.y_grid, grid.density)


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------


def _x_cols(D):
    return ["x"] if D == 1 else [f"x{d + 1}" for d in range(D)]


def write_grid_csv(grid: PredictiveGrid, path, fmt=lambda v: format(float(v), ".17g")):
    """Long format: one row per (x*, y*) cell."""
    D = grid.x_grid.shape[1]
    with Path(path).open("w", newline="") as fh:
        fh.write(",".join(_x_cols(D) + ["y", "density"]) + "\n")
        ys = [fmt(v) for v in grid.y_grid]
        for g in range(grid.x_grid.shape[0]):
            xs = ",".join(fmt(v) for v in grid.x_grid[g])
            row = grid.density[g]
            fh.write("".join(f"{xs},{ys[i]},{fmt(row[i])}\n" for i in range(len(ys))))


def read_grid_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`write_grid_csv`: returns (x_grid, y_grid, density)."""
    with Path(path).open() as fh:
        header = fh.readline().strip().split(",")
    D = len(header) - 2
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    X = arr[:, :D]
    y = arr[:, D]
    # rows are grouped by x*: y repeats with period Ny
    ny = int(np.argmax(y[1:] <= y[:-1]) + 1) if np.any(y[1:] <= y[:-1]) else y.size
    G = y.size // ny
    if G * ny != y.size:
        raise ValueError(f"{path}: grid rows are not a full x*-by-y* product")
    return X[::ny], y[:ny], arr[:, D + 1].reshape(G, ny)


def write_summary_csv(grid: PredictiveGrid, median, path, fmt=lambda v: format(float(v), ".17g")):
    D = grid.x_grid.shape[1]
    with Path(path).open("w", newline="") as fh:
        fh.write(",".join(_x_cols(D) + ["mean", "median"]) + "\n")
        for g in range(grid.x_grid.shape[0]):
            fh.write(",".join([fmt(v) for v in grid.x_grid[g]] + [fmt(grid.mean[g]), fmt(median[g])]) + "\n")
