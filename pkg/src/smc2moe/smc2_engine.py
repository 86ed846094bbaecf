"""Nested SMC (SMC²) for mixtures of GP experts.

The outer sampler moves a cloud of J particles ``(C, Ψ)`` through a tempered
sequence ``0 = κ_0 < κ_1 < ... < κ_T = 1``.  Each outer particle carries an
inner SMC ensemble of M expert-parameter sets whose running product of
tempered-likelihood means, ``Ẑ``, is an unbiased estimate of the tempered
marginal likelihood of the particle's allocation.  Outer particles are
reweighted by the ratio of successive ``Ẑ``'s, resampled every step, and moved
with a particle-marginal Metropolis-Hastings kernel whose proposals rerun the
inner SMC from the prior through the whole κ history.

Inner members are joint across experts: member m holds one parameter vector
per expert, is weighted by the full-data likelihood and is resampled as a
unit.  The MCMC moves act on one expert at a time because the tempered target
factorizes over experts given C.

Every random draw comes from a stream keyed by ``(seed, purpose, step, ...)``
(see :mod:`smc2moe.rng`), so results do not depend on the worker count.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numba
import numpy as np

from . import rng as rngmod
from .errors import ConfigError, DegenerateWeightsError
from .gating_prior import (
    GatingParams,
    PriorSpec,
    log_prior_gating,
    sample_allocation,
    sample_gating,
    sample_thetas,
)
from .gp_core import _JITTER, _loglik_experts, _loglik_one_expert, partition_index

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SMC2Config:
    J: int = 100
    M: int = 30
    eta: float = 0.9
    delta: float = 0.05
    max_mcmc_steps: int = 10
    seed: int = 0
    resampling: str = "systematic"
    proposal_scale: float = 1.0
    workers: int = 1

    def __post_init__(self):
        if self.J < 2 or self.M < 2:
            raise ConfigError("J and M must both be at least 2")
        if not 0.0 < self.eta < 1.0:
            raise ConfigError("eta must lie in (0, 1)")
        if not self.delta > 0:
            raise ConfigError("delta must be positive")
        if self.max_mcmc_steps < 1:
            raise ConfigError("max_mcmc_steps must be at least 1")
        if self.resampling != "systematic":
            raise ConfigError(f"unsupported resampling method {self.resampling!r}")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if not self.proposal_scale > 0:
            raise ConfigError("proposal_scale must be positive")


# ---------------------------------------------------------------------------
# weights, ESS, resampling, tempering
# ---------------------------------------------------------------------------


def normalize_log_weights(log_w) -> np.ndarray:
    log_w = np.asarray(log_w, dtype=float)
    top = np.max(log_w) if log_w.size else -np.inf
    if not np.isfinite(top):
        raise DegenerateWeightsError("all weights are zero")
    w = np.exp(log_w - top)
    return w / w.sum()


def ess(weights) -> float:
    """Effective sample size 1 / Σ w² of normalized weights."""
    w = np.asarray(weights, dtype=float)
    s = w.sum()
    if w.size == 0 or not np.isfinite(s) or s <= 0:
        raise DegenerateWeightsError("weights are all zero")
    if np.any(w < 0) or abs(s - 1.0) > 1e-9:
        raise ValueError("weights must be non-negative and sum to one")
    return float(1.0 / np.sum(w * w))


def systematic_indices(weights, u: float) -> np.ndarray:
    """Ancestor indices from systematic resampling with offset ``u`` in [0, 1)."""
    w = np.asarray(weights, dtype=float)
    n = w.shape[0]
    if n == 0 or not np.isfinite(w.sum()) or w.sum() <= 0:
        raise DegenerateWeightsError("cannot resample degenerate weights")
    cdf = np.cumsum(w / w.sum())
    positions = (u + np.arange(n)) / n
    return np.minimum(np.searchsorted(cdf, positions, side="right"), n - 1)


def resample(particles: Sequence, weights, rng: np.random.Generator):
    """Systematic resampling; returns ``(new_particles, ancestor_indices)``."""
    idx = systematic_indices(weights, rng.random())
    return [particles[i] for i in idx], idx


def log_mean_exp_increment(member_logliks, dkappa: float) -> np.ndarray:
    """log (1/M) Σ_m exp(Δκ ℓ_m) along the last axis."""
    ll = np.asarray(member_logliks, dtype=float)
    M = ll.shape[-1]
    if dkappa == 0.0:
        return np.zeros(ll.shape[:-1])
    return _logsumexp(dkappa * ll) - math.log(M)


def _logsumexp(a):
    # plain numpy along the last axis; scipy's version costs more than the sum here
    top = np.max(a, axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.sum(np.exp(a - top), axis=-1)) + top[..., 0]


def ess_ratio(member_logliks, log_weights, dkappa: float) -> float:
    """ESS after reweighting by ``Δκ`` divided by the current ESS."""
    w0 = normalize_log_weights(log_weights)
    inc = log_mean_exp_increment(member_logliks, dkappa)
    w1 = normalize_log_weights(np.asarray(log_weights, dtype=float) + inc)
    return ess(w1) / ess(w0)


def adapt_kappa(kappa: float, member_logliks, log_weights, eta: float, tol: float = 1e-6):
    """Largest κ' ∈ (κ, 1] whose reweighting keeps ESS(κ')/ESS(κ) ≥ η.

    ``member_logliks`` is J x M (full-data log-likelihood of every inner
    member).  Bisection stops once the bracket is narrower than ``tol``.
    Returns ``(kappa_new, warning)``; ``warning`` is None unless even the
    smallest bracketed step misses the target, in which case that step is
    taken anyway so the schedule keeps increasing.
    """
    if kappa >= 1.0:
        return 1.0, None
    if ess_ratio(member_logliks, log_weights, 1.0 - kappa) >= eta:
        return 1.0, None
    lo, hi = kappa, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if ess_ratio(member_logliks, log_weights, mid - kappa) >= eta:
            lo = mid
        else:
            hi = mid
    if lo > kappa:
        return lo, None
    return hi, f"ESS target {eta} missed even for step {hi - kappa:.3g}"


def mcmc_stop_rule(trace: Sequence[float], delta: float, cap: int) -> bool:
    """Stop once the relative change of the distance trace drops below ``delta``.

    ``trace`` is ``[d(0), d(1), ..., d(n)]``.  A zero previous distance means
    nothing has moved yet, so sampling continues unless the cap is reached.
    """
    n = len(trace) - 1
    if n < 1:
        raise ValueError("need at least one MCMC step")
    if n >= cap:
        return True
    prev, cur = trace[-2], trace[-1]
    if prev == 0:
        return False
    return abs(cur - prev) / prev < delta


# ---------------------------------------------------------------------------
# expert (inner) models
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _log_prior_theta(th, hyper):
    # constants dropped: only differences are used
    if th[0] < 0.0 or th[0] > hyper[0]:
        return -np.inf
    lp = 0.0
    for i in range(1, th.shape[0]):
        if th[i] < 0.0:
            return -np.inf
        s = hyper[1] if i == 1 else (hyper[2] if i == 2 else hyper[3])
        lp -= 0.5 * (th[i] / s) ** 2
    # length scales must be strictly positive for the kernel
    for i in range(3, th.shape[0]):
        if th[i] == 0.0:
            return -np.inf
    return lp


@numba.njit(cache=True)
def _rw_sweep(X, Y, order, starts, theta, ll, chols, z, u, kappa, hyper, jitter, counts):
    """One random-walk Metropolis sweep over every (expert, member) pair.

    counts: [support rejections, evaluations, failed factorizations,
             accepted, evaluations on non-empty experts]
    """
    M, K, P = theta.shape
    prop = np.empty(P)
    for k in range(K):
        nonempty = starts[k + 1] > starts[k]
        for m in range(M):
            for a in range(P):
                s = theta[m, k, a]
                for b in range(a + 1):
                    s += chols[k, a, b] * z[k, m, b]
                prop[a] = s
            lp_prop = _log_prior_theta(prop, hyper)
            if lp_prop == -np.inf:
                counts[0] += 1
                continue
            lp_cur = _log_prior_theta(theta[m, k], hyper)
            llp, lev = _loglik_one_expert(X, Y, order, starts, k, prop, jitter)
            counts[1] += 1
            if nonempty:
                counts[4] += 1
            if lev < 0:
                counts[2] += 1
                continue
            log_a = lp_prop - lp_cur
            if kappa > 0.0:
                log_a += kappa * (llp - ll[m, k])
            if np.log(u[k, m]) < log_a:
                for a in range(P):
                    theta[m, k, a] = prop[a]
                ll[m, k] = llp
                counts[3] += 1


@numba.njit(cache=True)
def _member_logliks(X, Y, order, starts, theta, jitter, out, status):
    for m in range(theta.shape[0]):
        _loglik_experts(X, Y, order, starts, theta[m], jitter, out[m], status[m])


@numba.njit(cache=True)
def _mean_distance(a, b):
    """Mean Euclidean distance between matching rows of a and b."""
    tot = 0.0
    for i in range(a.shape[0]):
        s = 0.0
        for j in range(a.shape[1]):
            d = a[i, j] - b[i, j]
            s += d * d
        tot += math.sqrt(s)
    return tot / a.shape[0]


@numba.njit(cache=True)
def _proposal_chols(theta, w, scale):
    """Per-expert Cholesky factors of the weighted empirical covariance.

    Singular covariances fall back to the diagonal of marginal variances
    plus a 1e-8 floor.
    """
    M, K, P = theta.shape
    out = np.zeros((K, P, P))
    for k in range(K):
        mean = np.zeros(P)
        for m in range(M):
            for a in range(P):
                mean[a] += w[m] * theta[m, k, a]
        cov = np.zeros((P, P))
        for m in range(M):
            for a in range(P):
                da = theta[m, k, a] - mean[a]
                for b in range(P):
                    cov[a, b] += w[m] * da * (theta[m, k, b] - mean[b])
        cov *= scale
        ok = True
        try:
            L = np.linalg.cholesky(cov)
            for a in range(P):
                if not (L[a, a] > 0.0) or not np.isfinite(L[a, a]):
                    ok = False
        except Exception:  # noqa: BLE001
            ok = False
        if ok:
            out[k] = L
        else:
            for a in range(P):
                out[k, a, a] = np.sqrt(max(cov[a, a], 0.0) + 1e-8)
    return out


class GPExperts:
    """Inner-model adapter: K independent GP experts on a fixed dataset."""

    def __init__(self, X, Y, spec: PriorSpec):
        self.X = np.ascontiguousarray(np.asarray(X, dtype=float).reshape(-1, spec.D))
        self.Y = np.ascontiguousarray(np.asarray(Y, dtype=float).reshape(-1))
        self.spec = spec
        self.K = spec.K
        self.P = spec.n_theta
        self._hyper = spec.expert_hyper

    def sample_prior(self, M: int, rng: np.random.Generator) -> np.ndarray:
        return sample_thetas(self.spec, (M, self.K), rng)

    def partition(self, labels):
        return partition_index(labels, self.K)

    def loglik(self, theta, part):
        """Per-member, per-expert log marginal likelihoods (M x K) and the work done."""
        order, starts = part
        M = theta.shape[0]
        out = np.empty((M, self.K))
        status = np.empty((M, self.K), dtype=np.int64)
        _member_logliks(self.X, self.Y, order, starts, np.ascontiguousarray(theta), _JITTER, out, status)
        nonempty = int(np.count_nonzero(np.diff(starts)))
        stats = {"evals": M * self.K, "nonempty_evals": M * nonempty, "failed": int(np.sum(status < 0))}
        return out, stats

    def proposal(self, theta, weights, scale: float):
        return _proposal_chols(np.ascontiguousarray(theta), np.asarray(weights, dtype=float), float(scale))

    def mutate(self, theta, ll, part, kappa: float, chols, rng: np.random.Generator):
        """One RW-Metropolis sweep targeting π₀(Θ) p(Y|X,C,Θ)^κ, in place."""
        order, starts = part
        M = theta.shape[0]
        z = rng.standard_normal((self.K, M, self.P))
        u = rng.random((self.K, M))
        counts = np.zeros(5, dtype=np.int64)
        _rw_sweep(self.X, self.Y, order, starts, theta, ll, chols, z, u, float(kappa), self._hyper, _JITTER, counts)
        return {
            "support_rejections": int(counts[0]),
            "evals": int(counts[1]),
            "failed": int(counts[2]),
            "accepted": int(counts[3]),
            "nonempty_evals": int(counts[4]),
            "proposals": M * self.K,
        }


# ---------------------------------------------------------------------------
# inner SMC
# ---------------------------------------------------------------------------


@dataclass
class InnerEnsemble:
    """M joint members (M x K x P), their cached log-likelihoods and the Ẑ increments."""

    theta: np.ndarray
    loglik: np.ndarray
    increments: list = field(default_factory=list)

    @property
    def M(self) -> int:
        return self.theta.shape[0]

    @property
    def member_logliks(self) -> np.ndarray:
        return self.loglik.sum(axis=1)

    @property
    def log_zhat(self) -> float:
        return float(np.sum(self.increments))


def _merge(total: dict, part: dict):
    for k, v in part.items():
        total[k] = total.get(k, 0) + v


def inner_smc_step(ens: InnerEnsemble, model, part, kappa_prev: float, kappa_new: float,
                   delta: float, cap: int, rng: np.random.Generator, scale: float = 1.0):
    """Reweight, resample and mutate one inner ensemble from κ_prev to κ_new.

    Returns ``(new_ensemble, log_increment, stats)``; the increment is
    log (1/M) Σ_m exp((κ_new - κ_prev) ℓ_m) and is also appended to the new
    ensemble's increment list.
    """
    if not kappa_new > kappa_prev:
        raise ValueError("kappa must increase")
    dk = kappa_new - kappa_prev
    ll_m = ens.member_logliks
    inc = float(log_mean_exp_increment(ll_m, dk))
    if not np.isfinite(inc):
        raise DegenerateWeightsError("every inner member has zero likelihood")
    w = normalize_log_weights(dk * ll_m)
    chols = model.proposal(ens.theta, w, scale)
    idx = systematic_indices(w, rng.random())
    theta = ens.theta[idx].copy()
    ll = ens.loglik[idx].copy()
    stats = {"sweeps": 0}
    rho0 = theta.reshape(theta.shape[0], -1).copy()
    trace = [0.0]
    while True:
        _merge(stats, model.mutate(theta, ll, part, kappa_new, chols, rng))
        stats["sweeps"] += 1
        trace.append(_mean_distance(theta.reshape(theta.shape[0], -1), rho0))
        if mcmc_stop_rule(trace, delta, cap):
            break
    return InnerEnsemble(theta, ll, list(ens.increments) + [inc]), inc, stats


def init_inner(model, part, M: int, rng: np.random.Generator):
    theta = model.sample_prior(M, rng)
    ll, stats = model.loglik(theta, part)
    return InnerEnsemble(theta, ll, []), stats


def run_inner_smc(model, part, kappas: Sequence[float], M: int, delta: float, cap: int,
                  rng: np.random.Generator, scale: float = 1.0):
    """Fresh inner SMC from the prior through the schedule ``kappas`` (starting at 0).

    Returns ``(ensemble, log_zhat, stats)``.
    """
    ens, stats = init_inner(model, part, M, rng)
    stats = dict(stats)
    stats["sweeps"] = 0
    for s in range(1, len(kappas)):
        ens, _, st = inner_smc_step(ens, model, part, kappas[s - 1], kappas[s], delta, cap, rng, scale)
        _merge(stats, st)
    return ens, ens.log_zhat, stats


# ---------------------------------------------------------------------------
# outer particles and PMMH
# ---------------------------------------------------------------------------


@dataclass
class OuterParticle:
    labels: np.ndarray
    psi: GatingParams
    ens: InnerEnsemble

    @property
    def log_zhat(self) -> float:
        return self.ens.log_zhat


@dataclass(frozen=True)
class ProposalPool:
    """Random-walk factors for the gating means/sds block and the log-weight block."""

    musd_factor: np.ndarray
    lognu_factor: np.ndarray

    @classmethod
    def from_cloud(cls, particles: Sequence[OuterParticle], weights, scale: float = 1.0) -> "ProposalPool":
        w = np.asarray(weights, dtype=float)
        musd = np.array([np.concatenate([p.psi.means.ravel(), p.psi.sds.ravel()]) for p in particles])
        lognu = np.array([p.psi.log_weights for p in particles])
        return cls(_psd_factor(_weighted_cov(musd, w) * scale), _psd_factor(_weighted_cov(lognu, w) * scale))

    @classmethod
    def fixed(cls, musd_cov, lognu_cov) -> "ProposalPool":
        return cls(_psd_factor(np.atleast_2d(musd_cov)), _psd_factor(np.atleast_2d(lognu_cov)))


def _weighted_cov(V, w):
    mean = w @ V
    d = V - mean
    return (d * w[:, None]).T @ d


def _psd_factor(cov):
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def pmmh_mutate(particle: OuterParticle, pool: ProposalPool, kappas: Sequence[float], model,
                spec: PriorSpec, X, config: SMC2Config, rng: np.random.Generator):
    """One particle-marginal Metropolis-Hastings step at temperature ``kappas[-1]``.

    Ψ moves by a Gaussian random walk on (μ, σ) and on log ν, C is redrawn
    from the gating prior given the proposed Ψ, and a fresh inner SMC yields
    the proposal's Ẑ.  The allocation proposal cancels p(C | X, Ψ), leaving

        log α = log Ẑ* - log Ẑ + log π₀(Ψ*) - log π₀(Ψ) + Σ log ν* - Σ log ν,

    where the last pair is the Jacobian of the log-ν walk.
    Returns ``(particle, info)``.
    """
    psi = particle.psi
    K, D = psi.K, psi.D
    step = pool.musd_factor @ rng.standard_normal(pool.musd_factor.shape[1])
    step_nu = pool.lognu_factor @ rng.standard_normal(pool.lognu_factor.shape[1])
    u = rng.random()
    musd = np.concatenate([psi.means.ravel(), psi.sds.ravel()]) + step
    sds = musd[K * D:].reshape(K, D)
    info = {"accepted": False, "support_rejected": False, "failed": False, "evals": 0, "nonempty_evals": 0}
    if np.any(sds <= 0):
        info["support_rejected"] = True
        return particle, info
    psi_new = GatingParams(psi.log_weights + step_nu, musd[: K * D].reshape(K, D), sds)
    labels_new = sample_allocation(X, psi_new, rng)
    part = model.partition(labels_new)
    ens, log_z, stats = run_inner_smc(model, part, kappas, particle.ens.M, config.delta,
                                      config.max_mcmc_steps, rng, config.proposal_scale)
    info["evals"] = stats.get("evals", 0)
    info["nonempty_evals"] = stats.get("nonempty_evals", 0)
    if not np.isfinite(log_z):
        info["failed"] = True
        return particle, info
    log_a = (log_z - particle.log_zhat
             + log_prior_gating(psi_new, spec) - log_prior_gating(psi, spec)
             + np.sum(psi_new.log_weights) - np.sum(psi.log_weights))
    if np.log(u) < log_a:
        info["accepted"] = True
        return OuterParticle(labels_new, psi_new, ens), info
    return particle, info


# ---------------------------------------------------------------------------
# worker plumbing
# ---------------------------------------------------------------------------

_CTX: dict[str, Any] = {}


def _set_context(ctx):
    _CTX.clear()
    _CTX.update(ctx)


def _task_init(j):
    c = _CTX
    cfg, model, spec = c["config"], c["model"], c["spec"]
    g = rngmod.stream(cfg.seed, rngmod.INIT, j)
    psi = sample_gating(spec, g)
    labels = sample_allocation(model.X, psi, g)
    ens, stats = init_inner(model, model.partition(labels), cfg.M, g)
    return OuterParticle(labels, psi, ens), stats


def _task_inner(args):
    j, t, particle, kappa_prev, kappa_new = args
    c = _CTX
    cfg, model = c["config"], c["model"]
    g = rngmod.stream(cfg.seed, rngmod.INNER_STEP, t, j)
    ens, _, stats = inner_smc_step(particle.ens, model, model.partition(particle.labels), kappa_prev,
                                   kappa_new, cfg.delta, cfg.max_mcmc_steps, g, cfg.proposal_scale)
    return OuterParticle(particle.labels, particle.psi, ens), stats


def _task_pmmh(args):
    j, t, n, particle, pool, kappas = args
    c = _CTX
    cfg = c["config"]
    g = rngmod.stream(cfg.seed, rngmod.PMMH, t, n, j)
    return pmmh_mutate(particle, pool, kappas, c["model"], c["spec"], c["model"].X, cfg, g)


class _Pool:
    """Ordered map over particles, in-process or on a process pool."""

    def __init__(self, workers, ctx):
        self.workers = workers
        _set_context(ctx)
        self._ex = None
        if workers > 1:
            self._ex = ProcessPoolExecutor(workers, initializer=_set_context, initargs=(ctx,))

    def map(self, fn, items):
        items = list(items)
        if self._ex is None:
            return [fn(it) for it in items]
        chunk = max(1, math.ceil(len(items) / (4 * self.workers)))
        return list(self._ex.map(fn, items, chunksize=chunk))

    def close(self):
        if self._ex is not None:
            self._ex.shutdown()


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


@dataclass
class PosteriorSample:
    """Equally weighted SMC² output plus diagnostics."""

    particles: list
    log_weights: np.ndarray
    kappas: list
    diagnostics: dict
    method: str = "smc2"

    @property
    def weights(self) -> np.ndarray:
        return normalize_log_weights(self.log_weights)


def _blank_diagnostics():
    return {
        "steps": [],
        "likelihood_evaluations": 0,
        "nonempty_likelihood_evaluations": 0,
        "failed_factorizations": 0,
        "support_rejections": 0,
        "warnings": [],
    }


def _account(diag, stats):
    diag["likelihood_evaluations"] += int(stats.get("evals", 0))
    diag["nonempty_likelihood_evaluations"] += int(stats.get("nonempty_evals", 0))
    diag["failed_factorizations"] += int(stats.get("failed", 0))
    diag["support_rejections"] += int(stats.get("support_rejections", 0))


def run_smc2(X, Y, spec: PriorSpec, config: SMC2Config, model=None, checkpoint_path=None,
             resume_from=None) -> PosteriorSample:
    """Run SMC² until κ reaches 1 and return J equally weighted particles.

    ``model`` defaults to GP experts on ``(X, Y)``; any object with the
    :class:`GPExperts` interface can be substituted.  When
    ``checkpoint_path`` is set the full state is written after every
    tempering step; ``resume_from`` continues such a checkpoint and yields
    the same result as an uninterrupted run.
    """
    X = np.asarray(X, dtype=float).reshape(-1, spec.D)
    Y = np.asarray(Y, dtype=float).reshape(-1)
    if model is None:
        model = GPExperts(X, Y, spec)
    J = config.J
    ctx = {"config": config, "model": model, "spec": spec}
    pool = _Pool(config.workers, ctx)
    try:
        if resume_from is not None:
            state = load_checkpoint(resume_from)
            particles, kappas, diag = state["particles"], state["kappas"], state["diagnostics"]
            if len(particles) != J:
                raise ConfigError("checkpoint particle count does not match config")
        else:
            diag = _blank_diagnostics()
            kappas = [0.0]
            results = pool.map(_task_init, range(J))
            particles = [p for p, _ in results]
            for _, st in results:
                _account(diag, st)
        log_w = np.full(J, -math.log(J))
        while kappas[-1] < 1.0:
            t = len(kappas)
            kappa = kappas[-1]
            ll = np.array([p.ens.member_logliks for p in particles])
            kappa_new, warning = adapt_kappa(kappa, ll, log_w, config.eta)
            if warning:
                diag["warnings"].append(f"step {t}: {warning}")
                log.warning("step %d: %s", t, warning)
            inc = log_mean_exp_increment(ll, kappa_new - kappa)
            ess_before = ess(normalize_log_weights(log_w))
            w = normalize_log_weights(log_w + inc)
            ess_after = ess(w)
            particles, _ = resample(particles, w, rngmod.stream(config.seed, rngmod.OUTER_RESAMPLE, t))
            log_w = np.full(J, -math.log(J))

            results = pool.map(_task_inner, [(j, t, p, kappa, kappa_new) for j, p in enumerate(particles)])
            particles = [p for p, _ in results]
            inner = {"sweeps": 0, "accepted": 0, "proposals": 0}
            for _, st in results:
                _account(diag, st)
                _merge(inner, {k: st.get(k, 0) for k in inner})

            kappas = kappas + [kappa_new]
            prop_pool = ProposalPool.from_cloud(particles, np.full(J, 1.0 / J), config.proposal_scale)
            rho0 = np.array([p.log_zhat for p in particles])
            trace = [0.0]
            outer = {"sweeps": 0, "accepted": 0, "proposals": 0, "support_rejected": 0}
            while True:
                n = outer["sweeps"] + 1
                res = pool.map(_task_pmmh, [(j, t, n, p, prop_pool, kappas) for j, p in enumerate(particles)])
                particles = [p for p, _ in res]
                for _, info in res:
                    outer["accepted"] += int(info["accepted"])
                    outer["support_rejected"] += int(info["support_rejected"])
                    outer["proposals"] += 1
                    _account(diag, info)
                    if info["failed"]:
                        diag["warnings"].append(f"step {t}: proposal likelihood failed; rejected")
                outer["sweeps"] = n
                rho = np.array([p.log_zhat for p in particles])
                trace.append(float(np.mean(np.abs(rho - rho0))))
                if mcmc_stop_rule(trace, config.delta, config.max_mcmc_steps):
                    break
            diag["steps"].append({
                "t": t,
                "kappa": kappa_new,
                "ess_before": ess_before,
                "ess_after": ess_after,
                "ess_ratio": ess_after / ess_before,
                "inner_sweeps": inner["sweeps"],
                "inner_acceptance": inner["accepted"] / max(inner["proposals"], 1),
                "outer_sweeps": outer["sweeps"],
                "outer_acceptance": outer["accepted"] / max(outer["proposals"], 1),
                "outer_support_rejections": outer["support_rejected"],
            })
            log.info("step %d kappa=%.6g ess=%.1f outer acc=%.3f", t, kappa_new, ess_after,
                     outer["accepted"] / max(outer["proposals"], 1))
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, particles, kappas, diag, config)
    finally:
        pool.close()
    return PosteriorSample(particles, np.full(J, -math.log(J)), kappas, diag)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def particle_to_dict(p: OuterParticle) -> dict:
    return {
        "labels": p.labels.tolist(),
        "log_weights": p.psi.log_weights.tolist(),
        "means": p.psi.means.tolist(),
        "sds": p.psi.sds.tolist(),
        "theta": p.ens.theta.tolist(),
        "loglik": p.ens.loglik.tolist(),
        "increments": list(p.ens.increments),
    }


def particle_from_dict(d: dict) -> OuterParticle:
    psi = GatingParams(np.array(d["log_weights"], float), np.array(d["means"], float), np.array(d["sds"], float))
    ens = InnerEnsemble(np.array(d["theta"], float), np.array(d["loglik"], float), [float(v) for v in d["increments"]])
    return OuterParticle(np.array(d["labels"], dtype=np.int64), psi, ens)


def save_checkpoint(path, particles, kappas, diagnostics, config: SMC2Config):
    state = {
        "format": "smc2moe-checkpoint/1",
        "rng": {"algorithm": rngmod.ALGORITHM, "seed": config.seed, "next_step": len(kappas)},
        "config": config.__dict__,
        "kappas": list(kappas),
        "diagnostics": diagnostics,
        "particles": [particle_to_dict(p) for p in particles],
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(state, fh, allow_nan=True)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    with open(path) as fh:
        state = json.load(fh)
    if state.get("format") != "smc2moe-checkpoint/1":
        raise ValueError(f"{path} is not an SMC2 checkpoint")
    state["particles"] = [particle_from_dict(d) for d in state["particles"]]
    state["config"] = replace(SMC2Config(), **state["config"])
    return state
