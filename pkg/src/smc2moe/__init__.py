"""Bayesian mixtures of Gaussian-process experts fitted by nested SMC (SMC²).

Modules: ``gp_core`` (GP experts), ``gating_prior`` (gating network and
priors), ``smc2_engine`` (the sampler), ``is_baseline`` (importance-sampling
comparison), ``predictive``, ``data_io``, ``eval_diagnostics`` and ``cli``.
"""

__version__ = "0.1.0"
