import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from bcfiv.bart import (
    BartConfig,
    calibrate_lambda,
    fit_bart,
    fit_bart_binary,
    log_tree_prior,
    ols_sigma,
    predict_posterior,
)
from bcfiv.bart import _kernels as K
from bcfiv.bart.sampler import ForestSpec, run_chain
from bcfiv.dataset import DomainError
from bcfiv.tree import DecisionTree, Node, apply

FAST = dict(n_burn=100, n_draw=100)


def stump():
    return DecisionTree.stump(1)


def split():
    return DecisionTree(
        (Node(0, 0, feature=0, threshold=0.5, left=1, right=2), Node(1, 1), Node(2, 1)), n_features=1
    )


# -- tree prior --------------------------------------------------------------


def test_log_tree_prior_single_leaf():
    assert abs(log_tree_prior(stump(), BartConfig()) - math.log(0.05)) <= 1e-12


def test_log_tree_prior_one_split_default():
    want = math.log(0.95) + 2 * math.log(1 - 0.95 / 4)
    assert abs(log_tree_prior(split(), BartConfig()) - want) <= 1e-12


def test_log_tree_prior_one_split_treatment_prior():
    want = math.log(0.25) + 2 * math.log(1 - 0.25 / 8)
    assert abs(log_tree_prior(split(), BartConfig(eta=3, beta=0.25)) - want) <= 1e-12


@pytest.mark.parametrize(
    "kw", [dict(beta=1.0), dict(beta=0.0), dict(eta=-1), dict(q=0), dict(nu=0), dict(n_draw=0),
           dict(proposal_probs=(0.5, 0.5, 0.5, 0.0))]
)
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        BartConfig(**kw)


# -- integrated likelihood and MH ratio --------------------------------------


def _brute_marginal(r, sigma2, tau2, groups):
    """log N(r; 0, sigma2 I + tau2 * block-ones) evaluated densely."""
    n = r.size
    cov = sigma2 * np.eye(n)
    for g in groups:
        cov[np.ix_(g, g)] += tau2
    return stats.multivariate_normal(np.zeros(n), cov).logpdf(r)


@pytest.mark.parametrize("seed", range(5))
def test_grow_ratio_matches_brute_force(seed):
    g = np.random.default_rng(seed)
    r = g.standard_normal(4) * 0.7 + np.array([0.5, 0.4, -0.6, -0.3])
    sigma2, tau2 = 0.3 + g.random(), 0.05 + g.random()
    left, right = [0, 1], [2, 3]
    cfg = BartConfig(q=1)
    pg, pp = 1.0, 0.25  # a stump can only grow; its child pair can be pruned
    log_alpha = K.grow_log_alpha(
        r[left].sum(), 2.0, r[right].sum(), 2.0, 0, sigma2, tau2, cfg.beta, cfg.eta, 1, 1, pg, pp
    )
    want = (
        _brute_marginal(r, sigma2, tau2, [left, right])
        - _brute_marginal(r, sigma2, tau2, [[0, 1, 2, 3]])
        + log_tree_prior(split(), cfg)
        - log_tree_prior(stump(), cfg)
        + math.log(pp / pg)
    )
    assert abs(log_alpha - want) <= 1e-10
    # the reverse move is the exact negation
    assert abs(-log_alpha - (-want)) <= 1e-10


def test_basis_weighted_leaf_likelihood():
    # rows with basis b contribute b*mu to the mean: compare with a dense normal
    b = np.array([1.0, 0.0, 1.0, 1.0])
    r = np.array([0.3, -1.2, 0.8, 0.1])
    sigma2, tau2 = 0.5, 0.7
    cov = sigma2 * np.eye(4) + tau2 * np.outer(b, b)
    dense = stats.multivariate_normal(np.zeros(4), cov).logpdf(r)
    base = stats.multivariate_normal(np.zeros(4), sigma2 * np.eye(4)).logpdf(r)
    assert abs(K.leaf_loglik(b @ r, b @ b, sigma2, tau2) - (dense - base)) <= 1e-12


# -- error-variance prior ----------------------------------------------------


@given(sigma_hat=st.floats(0.01, 10), nu=st.floats(1, 10), qtl=st.floats(0.5, 0.99))
def test_lambda_calibration(sigma_hat, nu, qtl):
    lam = calibrate_lambda(sigma_hat, nu, qtl)
    # sigma^2 ~ InvGamma(nu/2, scale=nu*lam/2); P(sigma < sigma_hat) = P(sigma^2 < sigma_hat^2)
    cdf = stats.invgamma.cdf(sigma_hat**2, nu / 2, scale=nu * lam / 2)
    assert abs(cdf - qtl) <= 1e-6


def test_lambda_calibration_default_quantile():
    lam = calibrate_lambda(1.3, 3, 0.9)
    assert abs(stats.invgamma.cdf(1.3**2, 1.5, scale=1.5 * lam) - 0.90) <= 1e-6


def test_ols_sigma_exact_fit_and_noise():
    x = np.arange(20.0)[:, None]
    assert ols_sigma(x, 2 * x[:, 0] + 1) == pytest.approx(0.0, abs=1e-12)
    g = np.random.default_rng(0)
    e = g.standard_normal(5000)
    assert ols_sigma(g.random((5000, 2)), e) == pytest.approx(e.std(), rel=0.01)


# -- continuous fits ---------------------------------------------------------


def test_constant_outcome():
    x = np.random.default_rng(1).random((30, 3))
    e = fit_bart(x, np.full(30, 4.2), BartConfig(q=20, **FAST))
    assert np.all(np.abs(predict_posterior(e, x).mean(axis=1) - 4.2) <= 1e-6)


def test_step_function_recovered():
    g = np.random.default_rng(2)
    x = np.repeat([[0.0], [1.0]], 500, axis=0)
    x = np.column_stack([x, g.random((1000, 2))])
    y = x[:, 0] + 0.1 * g.standard_normal(1000)
    e = fit_bart(x, y, BartConfig(q=50, **FAST, seed=3))
    m = e.mean()
    for arm in (0, 1):
        sel = x[:, 0] == arm
        assert abs(m[sel].mean() - y[sel].mean()) <= 0.05
    assert np.all(e.sigma > 0)


def test_null_sigma_recovery():
    g = np.random.default_rng(4)
    x = g.random((2000, 5))
    y = 0.7 * g.standard_normal(2000)
    e = fit_bart(x, y, BartConfig(q=50, n_burn=200, n_draw=200, seed=5))
    assert abs(e.sigma.mean() - 0.7) / 0.7 <= 0.10


def test_posterior_matches_training_draws_bitwise():
    g = np.random.default_rng(6)
    x = g.random((200, 3))
    y = np.sin(6 * x[:, 0]) + 0.2 * g.standard_normal(200)
    e = fit_bart(x, y, BartConfig(q=20, n_burn=30, n_draw=25, seed=1))
    p = predict_posterior(e, x)
    assert p.shape == (200, 25)
    assert np.array_equal(p, e.train_draws)
    assert np.array_equal(p.mean(axis=1), e.mean())


def test_predict_empty_and_mismatch():
    g = np.random.default_rng(7)
    x = g.random((50, 2))
    e = fit_bart(x, x[:, 0], BartConfig(q=5, n_burn=5, n_draw=4))
    assert predict_posterior(e, np.empty((0, 2))).shape == (0, 4)
    with pytest.raises(ValueError):
        predict_posterior(e, np.empty((3, 3)))


def test_single_leaf_ensemble_value():
    g = np.random.default_rng(8)
    x = g.random((40, 2))
    e = fit_bart(x, g.standard_normal(40), BartConfig(q=3, n_burn=2, n_draw=3))
    # overwrite every tree with a lone leaf of value v: every entry is offset + scale * q * v
    v = 0.1
    var = np.full_like(e.node_var, -1)
    val = np.full_like(e.node_val, v)
    roots = e.roots
    from dataclasses import replace

    flat = replace(e, node_var=var, node_val=val, roots=roots)
    p = predict_posterior(flat, x)
    assert np.allclose(p, e.offset + e.scale * e.q * v, rtol=0, atol=1e-12)


def test_size_and_domain_errors():
    with pytest.raises(ValueError, match="at least 10"):
        fit_bart(np.zeros((9, 1)), np.arange(9.0))
    with pytest.raises(DomainError):
        fit_bart(np.zeros((20, 1)), np.r_[np.nan, np.arange(19.0)])


def test_determinism():
    g = np.random.default_rng(9)
    x = g.random((100, 3))
    y = x[:, 1] + 0.1 * g.standard_normal(100)
    cfg = BartConfig(q=10, n_burn=20, n_draw=20, seed=11)
    a, b = fit_bart(x, y, cfg), fit_bart(x, y, cfg)
    assert np.array_equal(a.train_draws, b.train_draws)
    assert np.array_equal(a.sigma, b.sigma)
    c = fit_bart(x, y, BartConfig(q=10, n_burn=20, n_draw=20, seed=12))
    assert not np.array_equal(a.train_draws, c.train_draws)


def test_stored_trees_are_valid_and_leaves_nonempty():
    g = np.random.default_rng(10)
    x = g.random((300, 3))
    y = (x[:, 0] > 0.5) + 0.3 * g.standard_normal(300)
    e = fit_bart(x, y, BartConfig(q=10, n_burn=50, n_draw=5, seed=2))
    for d in range(e.n_draw):
        for t in range(e.q):
            tr = e.tree(d, t)  # construction validates the tree invariants
            used = set(np.unique(apply(tr, x)).tolist())
            assert used == set(tr.leaves)


def test_chain_samples_tree_prior_without_data():
    # With the basis switched off the likelihood is flat, so the chain must
    # reproduce the prior distribution of the leaf count.
    cfg = BartConfig(q=1, max_depth=8)
    x = np.random.default_rng(0).random((400, 4))
    spec = ForestSpec(x, cfg, 0.5, basis=np.zeros(400))
    res = run_chain([spec], np.zeros(400), n_burn=200, n_draw=6000, seed=3, nu=3, lam=1.0)
    # each recorded draw holds one tree; its leaves are the nodes without a split variable
    leaves = np.array([np.sum(d[0] < 0) for d in res.forests[0].drawn])

    def expect(depth):
        if depth == cfg.max_depth:
            return 1.0
        p = cfg.beta * (1 + depth) ** -cfg.eta
        return (1 - p) + p * 2 * expect(depth + 1)

    assert abs(leaves.mean() - expect(0)) <= 0.1


# -- binary fits -------------------------------------------------------------


def test_binary_null_signal():
    g = np.random.default_rng(12)
    x = g.random((2000, 3))
    y = (g.random(2000) < 0.5).astype(float)
    e = fit_bart_binary(x, y, BartConfig(q=50, **FAST))
    p = predict_posterior(e, x)
    assert abs(p.mean() - 0.5) <= 0.05
    assert np.all((p > 0) & (p < 1))


def test_binary_indicator_recovered():
    g = np.random.default_rng(13)
    x = np.column_stack([np.repeat([0.0, 1.0], 500), g.random((1000, 2))])
    e = fit_bart_binary(x, x[:, 0], BartConfig(q=50, **FAST))
    m = e.mean()
    assert np.all(m[x[:, 0] == 1] >= 0.9)
    assert np.all(m[x[:, 0] == 0] <= 0.1)


def test_binary_single_class_rejected():
    with pytest.raises(DomainError, match="single class"):
        fit_bart_binary(np.zeros((20, 1)), np.ones(20))
