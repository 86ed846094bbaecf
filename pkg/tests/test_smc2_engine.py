import math
import shutil

import numpy as np
import pytest
from scipy import stats

from smc2moe import rng as rngmod
from smc2moe import smc2_engine as eng
from smc2moe.errors import ConfigError, DegenerateWeightsError
from smc2moe.gating_prior import PriorSpec
from smc2moe.smc2_engine import (
    GPExperts,
    InnerEnsemble,
    OuterParticle,
    ProposalPool,
    SMC2Config,
    adapt_kappa,
    ess,
    ess_ratio,
    inner_smc_step,
    log_mean_exp_increment,
    mcmc_stop_rule,
    pmmh_mutate,
    resample,
    run_inner_smc,
    run_smc2,
    systematic_indices,
)
from smc2moe.toys import DiscreteSignalToy


def toy_data(n=12, seed=0):
    g = np.random.default_rng(seed)
    X = np.sort(g.uniform(size=n))
    Y = np.sin(6 * X) + 0.3 * g.standard_normal(n)
    return X, Y


# -- weights -------------------------------------------------------------------


def test_ess_examples():
    assert ess(np.full(100, 0.01)) == pytest.approx(100)
    assert ess([1.0, 0.0, 0.0]) == 1.0
    assert ess([0.5, 0.5, 0.0, 0.0]) == 2.0
    with pytest.raises(DegenerateWeightsError):
        ess([0.0, 0.0])
    with pytest.raises(ValueError):
        ess([0.5, 0.6])


def test_systematic_three_to_one_for_every_offset():
    for u in np.linspace(0, 1, 1001, endpoint=False):
        idx = systematic_indices([0.75, 0.25, 0.0, 0.0], u)
        assert np.bincount(idx, minlength=4).tolist() == [3, 1, 0, 0]


def test_systematic_single_weight_and_degenerate():
    idx = systematic_indices([0, 0, 1.0, 0, 0], 0.37)
    assert idx.tolist() == [2] * 5
    with pytest.raises(DegenerateWeightsError):
        systematic_indices([0.0, 0.0], 0.5)


def test_resample_uniform_offspring_expectation():
    J = 20
    rng = np.random.default_rng(9)
    counts = np.zeros(J)
    for _ in range(10_000):
        _, idx = resample(list(range(J)), np.full(J, 1 / J), rng)
        counts += np.bincount(idx, minlength=J)
    mean = counts / 10_000
    assert np.all(np.abs(mean - 1) < 0.05)


def test_resample_offspring_expectation_nonuniform():
    w = np.array([0.1, 0.05, 0.4, 0.3, 0.15])
    rng = np.random.default_rng(10)
    counts = np.zeros(5)
    n = 20_000
    for _ in range(n):
        counts += np.bincount(systematic_indices(w, rng.random()), minlength=5)
    np.testing.assert_allclose(counts / n, 5 * w, atol=0.02)


def test_log_mean_exp_increment_cases():
    assert log_mean_exp_increment(np.array([[-3.0]]), 0.2)[0] == pytest.approx(-0.6, abs=1e-15)
    ll = np.full((2, 7), -4.0)
    np.testing.assert_allclose(log_mean_exp_increment(ll, 0.25), -1.0, atol=1e-14)
    assert abs(log_mean_exp_increment(np.array([[-3.0, -8.0]]), 1e-12)[0]) < 1e-10
    np.testing.assert_array_equal(log_mean_exp_increment(ll, 0.0), 0.0)


# -- tempering -----------------------------------------------------------------


def test_adapt_kappa_identical_likelihoods_jump_to_one():
    ll = np.full((5, 3), -12.0)
    assert adapt_kappa(0.0, ll, np.zeros(5), 0.9) == (1.0, None)


def test_adapt_kappa_near_one():
    ll = np.array([[0.0], [-0.01]])
    assert adapt_kappa(0.999, ll, np.zeros(2), 0.9) == (1.0, None)


def test_adapt_kappa_against_grid_oracle():
    ll = np.array([[0.0], [-10.0]])

    def ratio(k):
        w = np.array([1.0, math.exp(-10 * k)])
        w /= w.sum()
        return (1 / np.sum(w * w)) / 2.0

    grid = np.linspace(0, 1, 1_000_001)
    ok = grid[np.array([ratio(k) for k in grid[::10]]).repeat(10)[: len(grid)] >= 0.9]
    # refine on the fine grid around the coarse answer
    fine = np.linspace(ok.max() - 2e-5, ok.max() + 2e-5, 4001)
    oracle = fine[np.array([ratio(k) for k in fine]) >= 0.9].max()
    k, warn = adapt_kappa(0.0, ll, np.zeros(2), 0.9)
    assert warn is None
    assert abs(k - oracle) < 1e-5
    assert ratio(k) >= 0.9 - 1e-9


def test_adapt_kappa_pathological_warns_and_advances():
    ll = np.array([[0.0], [-1e12]])
    k, warn = adapt_kappa(0.0, ll, np.zeros(2), 0.9)
    assert warn is not None
    assert 0 < k <= 1e-6


def test_ess_ratio_at_zero_step():
    ll = np.random.default_rng(0).normal(size=(6, 4))
    assert ess_ratio(ll, np.zeros(6), 0.0) == pytest.approx(1.0)


def test_stop_rule_examples():
    assert mcmc_stop_rule([0.0, 1.0, 1.0], 0.05, 10)
    assert not mcmc_stop_rule([0.0, 1.0, 2.0], 0.05, 10)
    assert mcmc_stop_rule([0.0, 1.0, 2.0], 0.05, 2)
    assert not mcmc_stop_rule([0.0, 0.0], 0.05, 10)
    assert mcmc_stop_rule([0.0, 0.0], 0.05, 1)
    with pytest.raises(ValueError):
        mcmc_stop_rule([0.0], 0.05, 10)


def test_stop_rule_geometric_trace():
    d = [1 - 0.5**n for n in range(0, 30)]
    expected = next(n for n in range(2, 30) if abs(d[n] - d[n - 1]) / d[n - 1] < 0.05)
    stopped = next(n for n in range(1, 30) if mcmc_stop_rule(d[: n + 1], 0.05, 100))
    assert stopped == expected == 5


# -- inner SMC -----------------------------------------------------------------


def test_inner_step_identical_members():
    toy = DiscreteSignalToy(*toy_data(), values=[[0.7, 1.2]], probs=[[0.5, 0.5]])
    labels = np.zeros(12, dtype=np.int64)
    tab = toy.partition(labels)
    theta = np.full((6, 1, 1), 0.7)
    ll, _ = toy.loglik(theta, tab)
    ens = InnerEnsemble(theta, ll, [])
    new, inc, _ = inner_smc_step(ens, toy, tab, 0.0, 0.3, 0.05, 1, np.random.default_rng(1))
    assert inc == pytest.approx(0.3 * ll[0, 0], abs=1e-12)
    assert new.increments == [inc]
    with pytest.raises(ValueError):
        inner_smc_step(ens, toy, tab, 0.3, 0.3, 0.05, 1, np.random.default_rng(1))


def test_inner_step_empty_subsets_keep_prior():
    spec = PriorSpec.default(2, 1.0, 1, 1.0)
    model = GPExperts(np.zeros((0, 1)), np.zeros(0), spec)
    part = model.partition(np.zeros(0, dtype=np.int64))
    g = np.random.default_rng(2)
    ens = eng.init_inner(model, part, 4000, g)[0]
    new, inc, _ = inner_smc_step(ens, model, part, 0.0, 0.5, 0.05, 3, g)
    assert inc == 0.0
    th = new.theta
    assert stats.kstest(th[:, 1, 0], stats.uniform(0, 1).cdf).pvalue > 0.01
    assert stats.kstest(th[:, 0, 1], stats.halfnorm(scale=0.25).cdf).pvalue > 0.01
    assert stats.kstest(th[:, 1, 3], stats.halfnorm(scale=0.125).cdf).pvalue > 0.01


def test_inner_smc_unbiased_on_toy():
    X, Y = toy_data(10, 3)
    toy = DiscreteSignalToy(X, Y, values=[[0.2, 1.5], [0.4, 0.9]], probs=[[0.3, 0.7], [0.6, 0.4]])
    labels = (X > 0.5).astype(np.int64)
    tab = toy.partition(labels)
    kappas = [0.0, 0.2, 0.5, 1.0]
    zs = []
    for r in range(300):
        ens, _, _ = run_inner_smc(toy, tab, kappas, 3, 0.05, 2, rngmod.stream(0, rngmod.TOY, r))
        zs.append(np.cumsum(ens.increments))
    zs = np.array(zs)
    for s in range(1, len(kappas)):
        exact = math.exp(toy.exact_log_z(labels, kappas[s]))
        est = np.exp(zs[:, s - 1])
        assert abs(est.mean() - exact) < 3 * est.std(ddof=1) / math.sqrt(len(est))


def test_proposal_chols_fallback_on_degenerate_cloud():
    theta = np.tile(np.array([0.5, 0.1, 0.2, 0.3]), (5, 1, 1))
    chols = eng._proposal_chols(theta, np.full(5, 0.2), 1.0)
    np.testing.assert_allclose(chols[0], 1e-4 * np.eye(4))


# -- PMMH ----------------------------------------------------------------------


def _toy_particle(toy, spec, seed, kappas, M=3):
    g = np.random.default_rng(seed)
    psi = eng.sample_gating(spec, g)
    labels = eng.sample_allocation(toy.X, psi, g)
    ens, _, _ = run_inner_smc(toy, toy.partition(labels), kappas, M, 0.05, 2, g)
    return OuterParticle(labels, psi, ens)


def test_pmmh_zero_walk_is_accepted_and_unchanged():
    X, Y = toy_data(8)
    toy = DiscreteSignalToy(X, Y, values=[[0.8]], probs=[[1.0]])
    spec = PriorSpec.default(1, 1.0, 1, 2.0)
    kappas = [0.0, 0.4, 1.0]
    p = _toy_particle(toy, spec, 0, kappas)
    pool = ProposalPool.fixed(np.zeros((2, 2)), np.zeros((1, 1)))
    cfg = SMC2Config(J=2, M=3)
    new, info = pmmh_mutate(p, pool, kappas, toy, spec, toy.X, cfg, np.random.default_rng(5))
    assert info["accepted"]
    np.testing.assert_array_equal(new.labels, p.labels)
    np.testing.assert_array_equal(new.psi.means, p.psi.means)
    assert new.log_zhat == pytest.approx(p.log_zhat, abs=1e-12)


def test_pmmh_negative_sd_rejected_before_likelihood():
    X, Y = toy_data(8)
    toy = DiscreteSignalToy(X, Y, values=[[0.8, 1.1]] * 2, probs=[[0.5, 0.5]] * 2)
    spec = PriorSpec.default(2, 1.0, 1, 2.0)
    p = _toy_particle(toy, spec, 1, [0.0, 1.0])
    cov = np.zeros((4, 4))
    cov[2, 2] = cov[3, 3] = 100.0
    pool = ProposalPool.fixed(cov, np.eye(2))
    cfg = SMC2Config(J=2, M=3)
    g = np.random.default_rng(0)
    seen = 0
    for _ in range(20):
        new, info = pmmh_mutate(p, pool, [0.0, 1.0], toy, spec, toy.X, cfg, g)
        if info["support_rejected"]:
            seen += 1
            assert new is p and info["evals"] == 0 and not info["accepted"]
    assert seen > 0


# -- full runs -----------------------------------------------------------------


def small_gp_problem(n=20, K=3, seed=0):
    g = np.random.default_rng(seed)
    X = np.sort(g.uniform(size=n))
    Y = np.where(X < 0.5, 0.3, 0.8) + 0.05 * g.standard_normal(n)
    return X, Y, PriorSpec.default(K, 1.0, 1, float(Y.max()))


def test_config_validation():
    with pytest.raises(ConfigError):
        SMC2Config(J=1)
    with pytest.raises(ConfigError):
        SMC2Config(eta=1.0)
    with pytest.raises(ConfigError):
        SMC2Config(resampling="multinomial")


def test_run_empty_dataset_is_prior():
    spec = PriorSpec.default(3, 1.0, 1, 1.0)
    res = run_smc2(np.zeros((0, 1)), np.zeros(0), spec, SMC2Config(J=4, M=3, seed=1))
    assert res.kappas == [0.0, 1.0]
    assert len(res.particles) == 4
    assert np.all(res.weights == 0.25)
    for p in res.particles:
        assert np.all(p.ens.loglik == 0.0)


def test_run_single_component_gating_posterior_is_prior():
    X, Y = toy_data(15)
    toy = DiscreteSignalToy(X, Y, values=[[0.8]], probs=[[1.0]])
    spec = PriorSpec.default(1, 1.0, 1, 2.0)
    res = run_smc2(X, Y, spec, SMC2Config(J=500, M=2, seed=3, max_mcmc_steps=3), model=toy)
    mu = np.array([p.psi.means[0, 0] for p in res.particles])
    sd = np.array([p.psi.sds[0, 0] for p in res.particles])
    assert stats.kstest(mu, stats.norm(0.5, spec.gate_mean_sd).cdf).pvalue > 0.01
    assert stats.kstest(sd, stats.halfnorm(scale=spec.gate_sd_scale).cdf).pvalue > 0.01


def test_schedule_and_ess_invariants():
    X, Y, spec = small_gp_problem()
    cfg = SMC2Config(J=12, M=4, seed=2, max_mcmc_steps=2)
    res = run_smc2(X, Y, spec, cfg)
    k = np.array(res.kappas)
    assert k[0] == 0.0 and k[-1] == 1.0 and np.all(np.diff(k) > 0)
    for s in res.diagnostics["steps"]:
        if not any(w.startswith(f"step {s['t']}:") and "ESS" in w for w in res.diagnostics["warnings"]):
            assert cfg.eta - 0.05 <= s["ess_ratio"] <= 1 + 1e-12
    assert np.all(res.weights == 1 / cfg.J)


def test_cost_accounting_matches_formula():
    X, Y = toy_data(10)
    toy = DiscreteSignalToy(X, Y, values=[[0.3, 1.0]] * 2, probs=[[0.5, 0.5]] * 2)
    spec = PriorSpec.default(2, 1.0, 1, 2.0)
    J, M, K = 6, 3, 2
    res = run_smc2(X, Y, spec, SMC2Config(J=J, M=M, seed=4, max_mcmc_steps=1), model=toy)
    expected = J * M * K
    for s in res.diagnostics["steps"]:
        t = s["t"]
        assert s["inner_sweeps"] == J and s["outer_sweeps"] == 1
        expected += J * M * K + (J - s["outer_support_rejections"]) * M * K * (1 + t)
    assert res.diagnostics["likelihood_evaluations"] == expected


def _same(a, b):
    assert a.kappas == b.kappas
    for p, q in zip(a.particles, b.particles):
        np.testing.assert_array_equal(p.labels, q.labels)
        np.testing.assert_array_equal(p.psi.log_weights, q.psi.log_weights)
        np.testing.assert_array_equal(p.ens.theta, q.ens.theta)
        assert p.ens.increments == q.ens.increments


def test_worker_count_does_not_change_results():
    X, Y, spec = small_gp_problem(15, 2)
    a = run_smc2(X, Y, spec, SMC2Config(J=6, M=3, seed=7, max_mcmc_steps=2, workers=1))
    b = run_smc2(X, Y, spec, SMC2Config(J=6, M=3, seed=7, max_mcmc_steps=2, workers=2))
    _same(a, b)


def test_checkpoint_resume_matches_uninterrupted(tmp_path, monkeypatch):
    X, Y, spec = small_gp_problem(15, 2)
    cfg = SMC2Config(J=6, M=3, seed=8, max_mcmc_steps=2)
    ck = tmp_path / "ck.json"
    saved = []
    real = eng.save_checkpoint

    def spy(path, particles, kappas, diagnostics, config):
        real(path, particles, kappas, diagnostics, config)
        copy = tmp_path / f"ck{len(kappas)}.json"
        shutil.copy(path, copy)
        saved.append(copy)

    monkeypatch.setattr(eng, "save_checkpoint", spy)
    full = run_smc2(X, Y, spec, cfg, checkpoint_path=ck)
    assert len(saved) >= 2
    resumed = run_smc2(X, Y, spec, cfg, resume_from=saved[0])
    _same(full, resumed)
    assert resumed.diagnostics["likelihood_evaluations"] == full.diagnostics["likelihood_evaluations"]


def test_particle_order_exchangeable():
    X, Y = toy_data(10)
    toy = DiscreteSignalToy(X, Y, values=[[0.3, 1.0]] * 2, probs=[[0.5, 0.5]] * 2)
    spec = PriorSpec.default(2, 1.0, 1, 2.0)
    parts = [_toy_particle(toy, spec, s, [0.0, 0.3]) for s in range(5)]
    cfg = SMC2Config(J=5, M=3, seed=1)
    eng._set_context({"config": cfg, "model": toy, "spec": spec})
    fwd = [eng._task_inner((j, 2, p, 0.3, 0.6))[0] for j, p in enumerate(parts)]
    perm = [3, 0, 4, 1, 2]
    back = {j: eng._task_inner((j, 2, parts[j], 0.3, 0.6))[0] for j in perm}
    for j in range(5):
        np.testing.assert_array_equal(fwd[j].ens.theta, back[j].ens.theta)
        assert fwd[j].ens.increments == back[j].ens.increments


def test_checkpoint_roundtrip(tmp_path):
    X, Y, spec = small_gp_problem(10, 2)
    cfg = SMC2Config(J=3, M=2, seed=1, max_mcmc_steps=1)
    res = run_smc2(X, Y, spec, cfg)
    eng.save_checkpoint(tmp_path / "c.json", res.particles, res.kappas, res.diagnostics, cfg)
    st = eng.load_checkpoint(tmp_path / "c.json")
    assert st["config"] == cfg
    assert st["kappas"] == res.kappas
    for p, q in zip(res.particles, st["particles"]):
        np.testing.assert_array_equal(p.ens.loglik, q.ens.loglik)
        np.testing.assert_array_equal(p.psi.sds, q.psi.sds)
