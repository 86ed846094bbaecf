"""Enumerable toy experts for exactness checks of the samplers.

Every GP hyperparameter is fixed except the signal sd, which takes one of
two values under a discrete prior (possibly different per expert).  The
tempered marginal likelihood of an allocation is then a finite sum,

    Z(κ | C) = ∏_k Σ_v π_k(v) L_k(v | C)^κ,

so inner-SMC normalizer estimates and PMMH chains can be compared with exact
values.  The class mirrors the :class:`~smc2moe.smc2_engine.GPExperts`
interface and plugs into the same engine functions.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from .gp_core import DataSubset, log_marginal_likelihood


class DiscreteSignalToy:
    """K experts whose only free parameter is σ_f ∈ ``values[k]``.

    ``values`` and ``probs`` are K x V arrays; the remaining parameters
    (mean, noise sd, length scales) are shared and fixed.
    """

    def __init__(self, X, Y, values, probs, mean=0.0, noise_sd=0.3, length_scale=0.3):
        self.X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.X.shape[0] != np.size(Y):
            self.X = self.X.reshape(-1, 1)
        self.Y = np.asarray(Y, dtype=float).reshape(-1)
        self.values = np.atleast_2d(np.asarray(values, dtype=float))
        self.probs = np.atleast_2d(np.asarray(probs, dtype=float))
        if self.values.shape != self.probs.shape:
            raise ValueError("values and probs must have the same shape")
        if np.any(self.probs <= 0) or not np.allclose(self.probs.sum(axis=1), 1.0):
            raise ValueError("each row of probs must be a positive probability vector")
        self.K, self.V = self.values.shape
        self.P = 1
        self._fixed = (float(mean), float(noise_sd), float(length_scale))
        self._cache: dict = {}

    def _theta(self, v):
        m, se, ls = self._fixed
        return np.array([m, se, v] + [ls] * self.X.shape[1])

    def table(self, labels) -> np.ndarray:
        """K x V log-likelihoods of every expert at every support point."""
        key = tuple(np.asarray(labels, dtype=np.int64).tolist())
        if key not in self._cache:
            tab = np.zeros((self.K, self.V))
            for k in range(self.K):
                sub = DataSubset.select(self.X, self.Y, np.asarray(key), k)
                for i in range(self.V):
                    tab[k, i] = log_marginal_likelihood(sub, self._theta(self.values[k, i]))
            self._cache[key] = tab
        return self._cache[key]

    def exact_log_z(self, labels, kappa: float) -> float:
        tab = self.table(labels)
        return float(sum(logsumexp(kappa * tab[k], b=self.probs[k]) for k in range(self.K)))

    # engine interface ----------------------------------------------------

    def _draw_index(self, size, rng):
        u = rng.random(size + (self.K,))
        cdf = np.cumsum(self.probs, axis=1)
        return (u[..., None] > cdf).sum(axis=-1).clip(max=self.V - 1)

    def sample_prior(self, M: int, rng: np.random.Generator) -> np.ndarray:
        idx = self._draw_index((M,), rng)
        return np.take_along_axis(self.values[None, :, :].repeat(M, 0), idx[..., None], axis=2)

    def partition(self, labels):
        return self.table(labels)

    def _lookup(self, theta, tab):
        M = theta.shape[0]
        out = np.empty((M, self.K))
        for k in range(self.K):
            hit = theta[:, k, 0][:, None] == self.values[k][None, :]
            out[:, k] = tab[k][hit.argmax(axis=1)]
        return out

    def loglik(self, theta, part):
        M = theta.shape[0]
        return self._lookup(theta, part), {"evals": M * self.K, "nonempty_evals": M * self.K, "failed": 0}

    def proposal(self, theta, weights, scale: float):
        return None

    def mutate(self, theta, ll, part, kappa: float, chols, rng: np.random.Generator):
        """Independence Metropolis from the prior, one expert at a time."""
        M = theta.shape[0]
        idx = self._draw_index((M,), rng)
        u = rng.random((M, self.K))
        accepted = 0
        for k in range(self.K):
            llp = part[k][idx[:, k]]
            acc = np.log(u[:, k]) < kappa * (llp - ll[:, k])
            theta[acc, k, 0] = self.values[k][idx[acc, k]]
            ll[acc, k] = llp[acc]
            accepted += int(acc.sum())
        return {"support_rejections": 0, "evals": M * self.K, "failed": 0, "accepted": accepted,
                "nonempty_evals": M * self.K, "proposals": M * self.K}
