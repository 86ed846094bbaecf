"""Gating network, allocation sampling and the priors on gating and expert parameters.

The gating network is a set of weighted axis-aligned normal kernels,

    p_k(x) ∝ ν_k ∏_d N(x_d | μ_kd, σ_kd²),

with ν_k ~ Gamma(α/K, 1).  Normalizing the ν's would give Dirichlet weights,
but the normalizer cancels in p_k(x), so only the unnormalized ν's are kept,
and they are stored as ``log ν`` because Gamma(α/K, 1) with small α/K puts
most of its mass far below the smallest positive double.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from .gp_core import ExpertParams

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GatingParams:
    """Per-component log weight, kernel mean and kernel sd (arrays of shape K, KxD, KxD)."""

    log_weights: np.ndarray
    means: np.ndarray
    sds: np.ndarray

    def __post_init__(self):
        lw = np.asarray(self.log_weights, dtype=float).reshape(-1)
        K = lw.shape[0]
        mu = np.asarray(self.means, dtype=float).reshape(K, -1)
        sd = np.asarray(self.sds, dtype=float).reshape(K, -1)
        if mu.shape != sd.shape:
            raise ValueError("means and sds must have the same shape")
        object.__setattr__(self, "log_weights", lw)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "sds", sd)

    @property
    def K(self) -> int:
        return self.log_weights.shape[0]

    @property
    def D(self) -> int:
        return self.means.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @classmethod
    def from_weights(cls, weights, means, sds) -> "GatingParams":
        with np.errstate(divide="ignore"):
            return cls(np.log(np.asarray(weights, dtype=float)), means, sds)


@dataclass(frozen=True)
class PriorSpec:
    """Hyperparameters of every prior in the model.

    ``gate_mean_loc`` (K x D) holds the prior means of the kernel centres.
    Scale fields are the sds of normal priors or the scales of half-normal
    priors; ``y_max`` bounds the uniform prior on the expert constant means.
    """

    K: int
    alpha: float
    D: int
    y_max: float
    gate_mean_loc: np.ndarray = field(repr=False)
    gate_mean_sd: float
    gate_sd_scale: float
    noise_scale: float = 0.25
    signal_scale: float = 0.25
    length_scale: float = 0.125

    def __post_init__(self):
        if self.K < 1 or self.D < 1:
            raise ValueError("K and D must be at least 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.y_max > 0:
            raise ValueError("y_max must be positive")
        scales = (self.gate_mean_sd, self.gate_sd_scale, self.noise_scale, self.signal_scale, self.length_scale)
        if any(not s > 0 for s in scales):
            raise ValueError("prior scales must be positive")
        loc = np.asarray(self.gate_mean_loc, dtype=float).reshape(self.K, self.D)
        object.__setattr__(self, "gate_mean_loc", loc)

    @classmethod
    def default(cls, K: int, alpha: float, D: int, y_max: float) -> "PriorSpec":
        """Linear-grid gating priors with the standard expert priors.

        One input dimension: centres at k/(K+1), sds 0.25/(K+1).  Several
        dimensions: a Cartesian grid with ceil(K^(1/D)) points per axis at
        spacing 1/ceil(K^(1/D)), filled row-major and truncated to K points,
        with sds 0.05/(K^(1/D)+1) for the centres and 0.01/(K^(1/D)+1) for
        the kernel widths.
        """
        if D == 1:
            loc = (np.arange(1, K + 1) / (K + 1.0)).reshape(K, 1)
            return cls(K, alpha, D, y_max, loc, 0.25 / (K + 1), 0.25 / (K + 1))
        root = K ** (1.0 / D)
        return cls(K, alpha, D, y_max, grid_locations(K, D), 0.05 / (root + 1), 0.01 / (root + 1))

    @property
    def expert_hyper(self) -> np.ndarray:
        """``[y_max, noise_scale, signal_scale, length_scale]`` for the numba kernels."""
        return np.array([self.y_max, self.noise_scale, self.signal_scale, self.length_scale])

    @property
    def n_theta(self) -> int:
        return self.D + 3


def grid_locations(K: int, D: int) -> np.ndarray:
    n = math.ceil(round(K ** (1.0 / D), 12))
    axis = (np.arange(n) + 0.5) / n
    mesh = np.stack(np.meshgrid(*([axis] * D), indexing="ij"), axis=-1).reshape(-1, D)
    return mesh[:K].copy()


# ---------------------------------------------------------------------------
# gating network
# ---------------------------------------------------------------------------


def log_kernels(X, psi: GatingParams) -> np.ndarray:
    """log of ν_k N(x | μ_k, diag σ_k²) for every row of X and every k (n x K)."""
    X = np.asarray(X, dtype=float).reshape(-1, psi.D)
    z = (X[:, None, :] - psi.means[None]) / psi.sds[None]
    return (
        psi.log_weights[None]
        - 0.5 * np.sum(z * z, axis=2)
        - np.sum(np.log(psi.sds), axis=1)[None]
        - psi.D * _HALF_LOG_2PI
    )


def kernel_value(x, k: int, psi: GatingParams) -> float:
    return float(np.exp(log_kernels(np.reshape(x, (1, psi.D)), psi)[0, k]))


def gating_probs_many(X, psi: GatingParams) -> np.ndarray:
    lk = log_kernels(X, psi)
    norm = logsumexp(lk, axis=1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        raise FloatingPointError("gating kernels are all zero at some input")
    return np.exp(lk - norm)


def gating_probs(x, psi: GatingParams) -> np.ndarray:
    """Simplex vector of gating probabilities at a single input."""
    return gating_probs_many(np.reshape(x, (1, psi.D)), psi)[0]


def sample_allocation(X, psi: GatingParams, rng: np.random.Generator) -> np.ndarray:
    """Draw c_i ~ Categorical(p(x_i)) independently; labels are 0-based."""
    X = np.asarray(X, dtype=float).reshape(-1, psi.D)
    if X.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    P = gating_probs_many(X, psi)
    u = rng.random(X.shape[0])
    cdf = np.cumsum(P, axis=1)
    labels = np.sum(cdf < u[:, None] * cdf[:, -1:], axis=1)
    return np.minimum(labels, psi.K - 1).astype(np.int64)


def log_allocation_prob(labels, X, psi: GatingParams) -> float:
    """log p(C | X, Ψ)."""
    X = np.asarray(X, dtype=float).reshape(-1, psi.D)
    if X.shape[0] == 0:
        return 0.0
    lk = log_kernels(X, psi)
    lp = lk - logsumexp(lk, axis=1, keepdims=True)
    return float(np.sum(lp[np.arange(X.shape[0]), np.asarray(labels)]))


# ---------------------------------------------------------------------------
# priors
# ---------------------------------------------------------------------------


def half_normal_logpdf(x, scale):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        val = math.log(2.0) - _HALF_LOG_2PI - np.log(scale) - 0.5 * (x / scale) ** 2
    return np.where(x >= 0, val, -np.inf)


def normal_logpdf(x, loc, scale):
    z = (np.asarray(x, dtype=float) - loc) / scale
    return -_HALF_LOG_2PI - np.log(scale) - 0.5 * z * z


def gamma_logpdf(nu, shape):
    """Gamma(shape, 1) log-density at ν (ν ≤ 0 gives -inf)."""
    nu = np.asarray(nu, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = (shape - 1.0) * np.log(nu) - nu - gammaln(shape)
    return np.where(nu > 0, val, -np.inf)


def log_gamma_logpdf(log_nu, shape):
    """Gamma(shape, 1) log-density of ν evaluated from log ν (no underflow)."""
    log_nu = np.asarray(log_nu, dtype=float)
    return (shape - 1.0) * log_nu - np.exp(log_nu) - gammaln(shape)


def sample_log_gamma(shape: float, size, rng: np.random.Generator) -> np.ndarray:
    """log of Gamma(shape, 1) draws, stable for tiny shapes.

    Uses G(a) = G(a + 1) U^(1/a) so the draw is formed in log space.
    """
    g = rng.standard_gamma(shape + 1.0, size=size)
    u = rng.random(size=size)
    return np.log(g) + np.log(u) / shape


def sample_gating(spec: PriorSpec, rng: np.random.Generator) -> GatingParams:
    K, D = spec.K, spec.D
    log_nu = sample_log_gamma(spec.alpha / K, K, rng)
    mu = spec.gate_mean_loc + spec.gate_mean_sd * rng.standard_normal((K, D))
    sd = np.abs(spec.gate_sd_scale * rng.standard_normal((K, D)))
    return GatingParams(log_nu, mu, sd)


def sample_thetas(spec: PriorSpec, size, rng: np.random.Generator) -> np.ndarray:
    """Expert parameter vectors drawn from the prior, shape ``size + (P,)``."""
    size = tuple(np.atleast_1d(size))
    out = np.empty(size + (spec.n_theta,))
    out[..., 0] = rng.uniform(0.0, spec.y_max, size=size)
    out[..., 1] = np.abs(spec.noise_scale * rng.standard_normal(size))
    out[..., 2] = np.abs(spec.signal_scale * rng.standard_normal(size))
    out[..., 3:] = np.abs(spec.length_scale * rng.standard_normal(size + (spec.D,)))
    return out


def sample_prior(spec: PriorSpec, rng: np.random.Generator) -> tuple[GatingParams, list[ExpertParams]]:
    """One joint draw of (Ψ, Θ_1..Θ_K) from the prior."""
    psi = sample_gating(spec, rng)
    thetas = sample_thetas(spec, spec.K, rng)
    return psi, [ExpertParams.from_vector(t) for t in thetas]


def log_prior_gating(psi: GatingParams, spec: PriorSpec) -> float:
    lp = np.sum(log_gamma_logpdf(psi.log_weights, spec.alpha / spec.K))
    lp += np.sum(normal_logpdf(psi.means, spec.gate_mean_loc, spec.gate_mean_sd))
    lp += np.sum(half_normal_logpdf(psi.sds, spec.gate_sd_scale))
    return float(lp)


def log_prior_thetas(thetas, spec: PriorSpec) -> np.ndarray:
    """Prior log-density of parameter vectors along the last axis."""
    th = np.asarray(thetas, dtype=float)
    m = th[..., 0]
    lp = np.where((m >= 0) & (m <= spec.y_max), -math.log(spec.y_max), -np.inf)
    lp = lp + half_normal_logpdf(th[..., 1], spec.noise_scale)
    lp = lp + half_normal_logpdf(th[..., 2], spec.signal_scale)
    lp = lp + np.sum(half_normal_logpdf(th[..., 3:], spec.length_scale), axis=-1)
    return lp


def log_prior_density(psi: GatingParams, thetas, spec: PriorSpec) -> float:
    """log π₀(Ψ) + Σ_k log π₀(Θ_k); -inf outside the support."""
    th = np.array([t.to_vector() if isinstance(t, ExpertParams) else np.asarray(t, float) for t in thetas])
    if np.any(psi.sds < 0):
        return -math.inf
    return float(log_prior_gating(psi, spec) + np.sum(log_prior_thetas(th, spec)))


def prior_mode_theta(spec: PriorSpec, floor: float = 1e-3) -> np.ndarray:
    """Prior mode of an expert: mid-range mean, scale parameters clamped to ``floor``."""
    return np.array([spec.y_max / 2.0, floor, floor] + [floor] * spec.D)


def sparsity_condition(alpha: float, K: int, D: int, rho: float | None = None) -> bool:
    """Whether α/K < ϱ/2, with ϱ defaulting to the 1 + 2D gating parameters per component."""
    if rho is None:
        rho = 1 + 2 * D
    return alpha / K < rho / 2.0
