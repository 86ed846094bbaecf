"""Importance-sampling baseline with MAP expert parameters.

Particles draw Ψ from its prior and C from the gating network given Ψ; each
expert then gets a MAP estimate of its parameters and the particle is
weighted by the product of expert marginal likelihoods at those estimates.
"""

from __future__ import annotations

import logging
import math
from fractions import Fraction
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logit, logsumexp

from . import rng as rngmod
from .errors import ConfigError, NumericalSingularityError
from .gating_prior import (
    GatingParams,
    PriorSpec,
    log_prior_thetas,
    prior_mode_theta,
    sample_allocation,
    sample_gating,
    sample_thetas,
)
from .gp_core import DataSubset, ExpertParams, _JITTER, _as_points, _loglik

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-3


@dataclass(frozen=True)
class OptimizerConfig:
    starts: int = 5
    max_iter: int = 200

    def __post_init__(self):
        if self.starts < 1 or self.max_iter < 1:
            raise ConfigError("optimizer starts and max_iter must be positive")


@dataclass
class ISParticle:
    labels: np.ndarray
    psi: GatingParams
    thetas: np.ndarray  # K x P MAP estimates
    log_weight: float


@dataclass
class ISResult:
    """Weighted IS particles; ``log_weights`` are normalized."""

    particles: list
    log_weights: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    method: str = "is"

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)


class MapFailure(NumericalSingularityError):
    pass


# ---------------------------------------------------------------------------
# MAP estimation
# ---------------------------------------------------------------------------


def to_unconstrained(theta, y_max: float) -> np.ndarray:
    th = np.asarray(theta, dtype=float)
    m = np.clip(th[0] / y_max, 1e-12, 1 - 1e-12)
    return np.concatenate([[logit(m)], np.log(np.maximum(th[1:], SCALE_FLOOR))])


def from_unconstrained(z, y_max: float) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return np.concatenate([[y_max * expit(z[0])], np.maximum(np.exp(z[1:]), SCALE_FLOOR)])


_LOG2 = math.log(2.0)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@numba.njit(cache=True)
def _neg_log_post(z, X, y, hyper, jitter):
    """-(log lik + log prior) at unconstrained z; returns (value, evaluated, failed)."""
    y_max = hyper[0]
    m = y_max / (1.0 + math.exp(-z[0]))
    if not 0.0 <= m <= y_max:
        return np.inf, 0, 0
    th = np.empty(z.shape[0])
    th[0] = m
    lp = -math.log(y_max)
    for i in range(1, z.shape[0]):
        v = max(math.exp(z[i]), SCALE_FLOOR)
        th[i] = v
        s = hyper[1] if i == 1 else (hyper[2] if i == 2 else hyper[3])
        lp += _LOG2 - _HALF_LOG_2PI - math.log(s) - 0.5 * (v / s) ** 2
    if y.shape[0] == 0:
        return -lp, 0, 0
    val, lev = _loglik(X, y, th, jitter)
    if lev < 0:
        return np.inf, 1, 1
    return -(lp + val), 1, 0


class _Objective:
    """Negative log posterior of one expert in unconstrained coordinates; counts evaluations."""

    def __init__(self, X, y, spec: PriorSpec):
        self.X, self.y, self.spec = X, y, spec
        self.hyper = spec.expert_hyper
        self.evals = 0
        self.failed = 0

    def log_post(self, theta) -> float:
        lp = float(log_prior_thetas(theta, self.spec))
        if not np.isfinite(lp):
            return -np.inf
        if self.y.shape[0] == 0:
            return lp
        self.evals += 1
        val, lev = _loglik(self.X, self.y, theta, _JITTER)
        if lev < 0:
            self.failed += 1
            return -np.inf
        return lp + val

    def __call__(self, z) -> float:
        v, ev, bad = _neg_log_post(z, self.X, self.y, self.hyper, _JITTER)
        self.evals += ev
        self.failed += bad
        return v if v == v else np.inf


def map_estimate(data: DataSubset, spec: PriorSpec, opt: OptimizerConfig | None = None,
                 rng: np.random.Generator | None = None, return_info: bool = False):
    """Multi-start Nelder-Mead maximizer of log p(Y_k | X_k, Θ) + log π₀(Θ).

    Positive parameters are optimized on the log scale and floored at 1e-3,
    the mean through a logistic map onto (0, y_max).  An empty subset returns
    the prior mode.  The returned point scores at least as well as every
    (floored) start.
    """
    opt = opt or OptimizerConfig()
    if len(data) == 0:
        th = prior_mode_theta(spec, SCALE_FLOOR)
        info = {"evals": 0, "failed": 0, "objective": float(log_prior_thetas(th, spec))}
        return (ExpertParams.from_vector(th), info) if return_info else ExpertParams.from_vector(th)
    if rng is None:
        rng = rngmod.stream(0, rngmod.MAP)
    X = _as_points(data.X, spec.D)
    obj = _Objective(X, np.ascontiguousarray(data.y), spec)
    starts = sample_thetas(spec, opt.starts, rng)
    best_z, best_f = None, np.inf
    for s in starts:
        z0 = to_unconstrained(s, spec.y_max)
        f0 = obj(z0)
        if f0 < best_f:
            best_z, best_f = z0, f0
        res = minimize(obj, z0, method="Nelder-Mead",
                       options={"maxiter": opt.max_iter, "xatol": 1e-6, "fatol": 1e-8})
        if np.isfinite(res.fun) and res.fun < best_f:
            best_z, best_f = res.x, float(res.fun)
    info = {"evals": obj.evals, "failed": obj.failed, "objective": -best_f}
    if best_z is None or not np.isfinite(best_f):
        raise MapFailure("every MAP start failed to factorize", tuple(_JITTER[1:]))
    th = from_unconstrained(best_z, spec.y_max)
    out = ExpertParams.from_vector(th)
    return (out, info) if return_info else out


# ---------------------------------------------------------------------------
# importance sampling
# ---------------------------------------------------------------------------


def _particle(j: int, X, Y, spec: PriorSpec, opt: OptimizerConfig, seed: int):
    g = rngmod.stream(seed, rngmod.IS_PARTICLE, j)
    psi = sample_gating(spec, g)
    labels = sample_allocation(X, psi, g)
    thetas = np.empty((spec.K, spec.n_theta))
    log_w = 0.0
    evals = 0
    warnings = []
    for k in range(spec.K):
        sub = DataSubset.select(X, Y, labels, k)
        try:
            est, info = map_estimate(sub, spec, opt, rngmod.stream(seed, rngmod.MAP, j, k), return_info=True)
            th = est.to_vector()
            evals += info["evals"]
        except MapFailure:
            th = prior_mode_theta(spec, SCALE_FLOOR)
            warnings.append(f"particle {j} expert {k}: MAP failed, prior mode used")
        thetas[k] = th
        if len(sub):
            val, lev = _loglik(_as_points(sub.X, spec.D), np.ascontiguousarray(sub.y), th, _JITTER)
            evals += 1
            log_w += val if lev >= 0 else -np.inf
    return ISParticle(labels, psi, thetas, float(log_w)), evals, warnings


def _task(args):
    return _particle(*args)


def run_is(X, Y, spec: PriorSpec, J: int | None = None, opt: OptimizerConfig | None = None,
           seed: int = 0, workers: int = 1, budget: int | None = None) -> ISResult:
    """Draw IS particles from the prior and weight them at MAP expert parameters.

    Give either ``J`` (particle count) or ``budget`` (likelihood evaluations
    on non-empty experts, MAP search included); with a budget, particles are
    added in index order until the cumulative count reaches it, so the result
    does not depend on ``workers``.
    """
    if (J is None) == (budget is None):
        raise ConfigError("give exactly one of J and budget")
    if J is not None and J < 1:
        raise ConfigError("J must be at least 1")
    opt = opt or OptimizerConfig()
    X = _as_points(X, spec.D)
    Y = np.asarray(Y, dtype=float).reshape(-1)
    ex = None
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        ex = ProcessPoolExecutor(workers)
    particles, evals, warns = [], [], []
    try:
        chunk = J if J is not None else max(4 * workers, 8)
        start, total = 0, 0
        while True:
            n = chunk if J is None else J - start
            args = [(j, X, Y, spec, opt, seed) for j in range(start, start + n)]
            res = list(ex.map(_task, args)) if ex else [_task(a) for a in args]
            for p, e, w in res:
                particles.append(p)
                evals.append(e)
                warns.extend(w)
                total += e
                if budget is not None and total >= budget:
                    break
            start += n
            if J is not None or total >= budget:
                break
    finally:
        if ex is not None:
            ex.shutdown()
    lw = np.array([p.log_weight for p in particles])
    if not np.any(np.isfinite(lw)):
        raise NumericalSingularityError("every IS particle has zero likelihood", tuple(_JITTER[1:]))
    lw = lw - logsumexp(lw)
    for w in warns:
        log.warning(w)
    w = np.exp(lw)
    diag = {
        "J": len(particles),
        "likelihood_evaluations": int(sum(evals)),
        "nonempty_likelihood_evaluations": int(sum(evals)),
        "ess": float(1.0 / np.sum(w * w)),
        "warnings": warns,
    }
    return ISResult(particles, lw, diag)


def is_sample_bound(N: int, K: int, t: int, log: bool = False) -> float:
    """K^N / (C(K, t) t!): the labelling count the IS proposal must cover.

    Exact rational arithmetic, rounded once; ``log=True`` returns the
    logarithm, which stays finite for any N.
    """
    if not 1 <= t <= K:
        raise ValueError("need 1 <= t <= K")
    if N < 0:
        raise ValueError("N must be non-negative")
    denom = math.comb(K, t) * math.factorial(t)
    if log:
        return N * math.log(K) - math.log(denom)
    try:
        return float(Fraction(K ** N, denom))
    except OverflowError:
        return math.inf
