import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mixscglr import Hyperparams, extract_components, make_model_data
from mixscglr.exceptions import DataError, ScglrError
from mixscglr.families import ResponseFamily
from mixscglr.linmix import GroupDesign
from mixscglr.tuning import (
    SimDesign,
    cv_error,
    grid_search,
    latent_metrics,
    make_folds,
    mrse,
    murse,
    simulate,
)
from mixscglr.tuning import cv as cvmod
from mixscglr.tuning.cv import FoldOutcome, fold_error, predictive_variance, run_parallel
from mixscglr.tuning.simulate import BETA1, BETA2, equicorrelated_bundle


@pytest.fixture(autouse=True)
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


def offdiag_mean(X):
    R = np.corrcoef(X, rowvar=False)
    return R[~np.eye(R.shape[0], dtype=bool)].mean()


# -- folds -------------------------------------------------------------------


def test_folds_balanced_layout():
    groups = GroupDesign.balanced(10, 10)
    plan = make_folds(groups, 2, 5, seed=0)
    assert plan.n_folds == 5
    for fold in plan.folds:
        assert len(fold) == 20
        np.testing.assert_array_equal(np.bincount(groups.group_of[fold], minlength=10), 2)


def test_folds_singletons_and_determinism():
    groups = GroupDesign.balanced(1, 5)
    plan = make_folds(groups, 1, 5, seed=3)
    assert sorted(len(f) for f in plan.folds) == [1] * 5
    again = make_folds(groups, 1, 5, seed=3)
    assert all(np.array_equal(a, b) for a, b in zip(plan.folds, again.folds))


@given(st.integers(1, 6), st.integers(1, 4), st.integers(2, 4), st.integers(0, 3), st.integers(0, 100))
def test_folds_partition(n_groups, holdout, n_folds, extra, seed):
    sizes = np.full(n_groups, holdout * n_folds) + np.arange(n_groups) % (extra + 1)
    groups = GroupDesign(np.repeat(np.arange(n_groups), sizes), n_groups)
    plan = make_folds(groups, holdout, n_folds, seed)
    allidx = np.concatenate(plan.folds)
    np.testing.assert_array_equal(np.sort(allidx), np.arange(groups.n))
    for j in range(n_folds):
        per_group = np.bincount(groups.group_of[plan.folds[j]], minlength=n_groups)
        assert np.all(per_group >= holdout)
        np.testing.assert_array_equal(np.sort(np.concatenate([plan.train(j), plan.folds[j]])), np.arange(groups.n))


def test_folds_infeasible():
    with pytest.raises(DataError, match="smallest group"):
        make_folds(GroupDesign.balanced(3, 4), 1, 5)
    with pytest.raises(DataError, match="two folds"):
        make_folds(GroupDesign.balanced(3, 4), 1, 1)


# -- errors -----------------------------------------------------------------


def test_fold_error_examples(rng):
    y = rng.normal(3.0, 2.0, 400)
    assert fold_error(y, y) == 0.0
    assert fold_error(y, np.full_like(y, y.mean())) == pytest.approx(y.std(), rel=1e-12)
    counts = rng.poisson(4.0, 50).astype(float)
    mu = rng.uniform(2, 6, 50)
    pearson = np.sqrt(np.mean((counts - mu) ** 2 / mu))
    var = predictive_variance(ResponseFamily("poisson"), mu)
    assert fold_error(counts, mu, var) == pytest.approx(pearson, rel=1e-12)


def test_predictive_variance_families():
    mu = np.array([0.2, 0.5])
    np.testing.assert_allclose(predictive_variance(ResponseFamily("bernoulli"), mu), mu * (1 - mu))
    binom = ResponseFamily("binomial", trials=np.array([10.0, 10.0]))
    counts = 10 * mu
    np.testing.assert_allclose(predictive_variance(binom, counts), 10 * mu * (1 - mu))
    np.testing.assert_allclose(predictive_variance(ResponseFamily("gaussian", dispersion=2.5), mu), 2.5)


def exact_data(rng, q=1):
    groups = GroupDesign.balanced(5, 10)
    X = rng.standard_normal((50, 3))
    Y = np.column_stack([X @ rng.standard_normal(3) + 1.0 for _ in range(q)])
    return make_model_data(Y, ["gaussian"] * q, X, groups)


def test_cv_exact_predictor_is_zero(rng):
    data = exact_data(rng)
    plan = make_folds(data.groups, 2, 5)
    hp = Hyperparams(K=3, s=0.0, psi_gain_tol=-np.inf)
    res = cv_error(data, hp, plan, mixed=False)
    assert res.E == pytest.approx(0.0, abs=1e-8)
    assert res.folds_used == 5


def test_cv_constant_predictor_matches_sd(rng):
    groups = GroupDesign.balanced(5, 10)
    y = rng.normal(0.0, 1.5, 50)
    X = rng.standard_normal((50, 2))
    data = make_model_data(y, "gaussian", X, groups)
    plan = make_folds(groups, 2, 5)
    res = cv_error(data, Hyperparams(K=0), plan, mixed=False)
    direct = np.mean([np.sqrt(np.mean((y[f] - y[plan.train(j)].mean()) ** 2)) for j, f in enumerate(plan.folds)])
    assert res.E == pytest.approx(direct, rel=1e-10)
    assert res.E == pytest.approx(y.std(), rel=0.15)


def test_cv_invariant_to_response_order(rng):
    groups = GroupDesign.balanced(5, 10)
    X = rng.standard_normal((50, 4))
    Y = np.column_stack([X @ rng.standard_normal(4) + rng.standard_normal(50) for _ in range(2)])
    plan = make_folds(groups, 2, 5)
    hp = Hyperparams(K=2)
    a = cv_error(make_model_data(Y, ["gaussian"] * 2, X, groups), hp, plan)
    b = cv_error(make_model_data(Y[:, ::-1], ["gaussian"] * 2, X, groups), hp, plan)
    assert a.E == pytest.approx(b.E, rel=1e-8)
    np.testing.assert_allclose(a.E_k, b.E_k[::-1], rtol=1e-8)


def test_grid_singleton_and_dominance(rng):
    data = exact_data(rng)
    plan = make_folds(data.groups, 2, 5)
    hp = Hyperparams(psi_gain_tol=-np.inf)
    res = grid_search(data, [2], [0.5], [1.0], plan, hp, mixed=False)
    assert (res.K, res.s, res.l) == (2, 0.5, 1.0)
    assert len(res.surface) == 1
    res = grid_search(data, [1, 3], [0.0], [1.0], plan, hp, mixed=False)
    assert res.K == 3
    assert res.E == pytest.approx(0.0, abs=1e-8)


def stub_outcomes(monkeypatch, err_of):
    def fake(data, hp, plan, j, K_values, standardised=False, mixed=True):
        errs = {K: err_of(K, hp.s, hp.l) for K in K_values}
        return FoldOutcome({K: None if e is None else np.array([e]) for K, e in errs.items()},
                           {K: True for K in K_values})
    monkeypatch.setattr(cvmod, "fold_outcome", fake)


def test_grid_ties_and_failures(rng, monkeypatch):
    data = exact_data(rng)
    plan = make_folds(data.groups, 2, 5)
    stub_outcomes(monkeypatch, lambda K, s, l: 1.0)
    res = grid_search(data, [3, 1, 2], [0.1, 0.5, 0.9], [4.0, 1.0], plan)
    assert (res.K, res.s, res.l) == (1, 0.9, 1.0)
    stub_outcomes(monkeypatch, lambda K, s, l: None if s == 0.9 else 2.0 - s)
    res = grid_search(data, [1], [0.1, 0.5, 0.9], [1.0], plan)
    assert res.s == 0.5
    assert [c["E"] for c in res.surface if c["s"] == 0.9] == [np.inf]
    stub_outcomes(monkeypatch, lambda K, s, l: None)
    with pytest.raises(ScglrError):
        grid_search(data, [1], [0.5], [1.0], plan)


def test_nonconverged_folds_excluded():
    outs = [FoldOutcome({1: np.array([1.0])}, {1: True}), FoldOutcome({1: np.array([5.0])}, {1: False})]
    res = cvmod.combine_folds(outs, 1, 1)
    assert res.E == 1.0
    assert res.excluded == [1]
    assert res.folds_used == 1


def test_run_parallel_processes():
    assert run_parallel(abs, [-1, -2, 3], jobs=2) == [1, 2, 3]
    assert run_parallel(abs, [-1], jobs=4) == [1]


# -- metrics ------------------------------------------------------------------


def test_murse_mrse_examples():
    b1, b2 = np.array([1.0, 2.0]), np.array([0.5, -1.0, 2.0])
    assert murse([(b1, b2)], (b1, b2)) == 0.0
    assert murse([(0 * b1, 0 * b2)], (b1, b2)) == 1.0
    assert murse([(1.1 * b1, b2)], (b1, b2)) == pytest.approx(0.01)
    assert mrse([b1, b1], b1) == 0.0
    assert mrse([0 * b1], b1) == 1.0
    assert mrse([1.1 * b1, b1], b1) == pytest.approx(0.005)
    with pytest.raises(DataError):
        mrse([b1], 0 * b1)
    with pytest.raises(DataError):
        murse([(b1,)], (b1, b2))


@given(st.integers(0, 10_000), st.integers(1, 5))
def test_murse_dominates_each_mrse(seed, B):
    rng = np.random.default_rng(seed)
    truths = (rng.standard_normal(3), rng.standard_normal(4))
    est = [tuple(t + rng.standard_normal(t.shape) for t in truths) for _ in range(B)]
    m = murse(est, truths)
    for k in range(2):
        assert m >= mrse([e[k] for e in est], truths[k]) - 1e-12


class _Stub:
    def __init__(self, F, beta_raw):
        self.components = F
        self.beta_raw = beta_raw


def test_latent_metrics_examples(rng):
    phi = rng.standard_normal(100)
    other = rng.standard_normal(100)
    other -= (other - other.mean()) @ (phi - phi.mean()) / np.sum((phi - phi.mean()) ** 2) * (phi - phi.mean())
    X = rng.standard_normal((100, 2))
    beta = np.array([[1.0, -1.0]])
    cor, err = latent_metrics(_Stub(np.column_stack([phi]), beta), X, [phi], [X @ beta[0]])
    assert cor[0] == pytest.approx(1.0)
    assert err[0] == pytest.approx(0.0, abs=1e-15)
    cor, _ = latent_metrics(_Stub(np.column_stack([other]), beta), X, [phi], [X @ beta[0]])
    assert cor[0] == pytest.approx(0.0, abs=1e-12)


# -- simulation ---------------------------------------------------------------


def test_bundle_correlations():
    rng = np.random.default_rng(11)
    assert abs(offdiag_mean(equicorrelated_bundle(rng, 10_000, 5, 0.0))) < 0.05
    assert offdiag_mean(equicorrelated_bundle(rng, 10_000, 5, 0.5)) == pytest.approx(0.5, abs=0.03)


def test_bundle_covariance_rate():
    rng = np.random.default_rng(12)
    devs = {}
    for n in (2_500, 40_000):
        reps = [abs(offdiag_mean(equicorrelated_bundle(rng, n, 5, 0.5)) - 0.5) for _ in range(20)]
        devs[n] = np.sqrt(np.mean(np.square(reps)))
    # sixteen times the sample size gives a quarter of the error, up to Monte-Carlo noise
    assert 2.0 < devs[2_500] / devs[40_000] < 8.0


def test_design_parameter_patterns():
    np.testing.assert_array_equal(BETA1, np.r_[np.zeros(15), [0.3] * 3, [0.4] * 4, [0.5] * 3, np.zeros(5)])
    np.testing.assert_array_equal(BETA2, np.r_[np.zeros(25), [0.3, 0.3, 0.4, 0.5, 0.5]])
    data, truths = simulate(SimDesign("bern_pois"))
    np.testing.assert_allclose(truths["beta"][0], 0.1 * BETA1)
    np.testing.assert_array_equal(truths["sigma2"], [0.1, 1.0])
    assert [f.kind for f in data.families] == ["bernoulli", "poisson"]
    data, truths = simulate(SimDesign("binom_pois"))
    np.testing.assert_array_equal(data.families[0].trials, 50)
    data, truths = simulate(SimDesign("highdim", p=200))
    assert data.p == 200 and data.q == 4 and data.n == 100
    data, truths = simulate(SimDesign("latent_bundle", N=50))
    assert data.n == 500 and data.p == 31
    np.testing.assert_array_equal(truths["sigma2"], [2.0, 1.0, 0.5])


@pytest.mark.parametrize("design", ["gauss_bundles", "bern_pois", "binom_pois", "latent_bundle", "highdim"])
def test_simulate_deterministic(design):
    a, ta = simulate(SimDesign(design, seed=5))
    b, tb = simulate(SimDesign(design, seed=5))
    assert np.array_equal(a.Y, b.Y) and np.array_equal(a.X, b.X)
    c, _ = simulate(SimDesign(design, seed=6))
    assert not np.array_equal(a.Y, c.Y)


def test_simulate_validation():
    with pytest.raises(DataError):
        SimDesign(tau=1.0)
    with pytest.raises(DataError):
        SimDesign("nope")
    with pytest.raises(DataError):
        SimDesign("highdim", p=170)


def test_latent_bundle_recovery_single_sample():
    data, truths = simulate(SimDesign("latent_bundle", N=50, stn=3.0, seed=0))
    model = extract_components(data, Hyperparams(K=2, s=0.5, l=4.0))
    cor, err = latent_metrics(model, data.X_raw, truths["latent"], truths["targets"])
    assert cor[0] > 0.9
    assert np.all(np.isfinite(err))
