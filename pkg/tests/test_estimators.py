import math

import numpy as np
import numpy.testing as npt
import pytest
from scipy.optimize import minimize_scalar
from scipy.special import expit

from clearner.constrained import solve_constrained_ols
from clearner.datagen import Dataset, gen_kang_schafer, KsConfig, make_folds
from clearner.estimators import (
    MMO,
    RECIPES,
    EstimError,
    NuisanceFit,
    RecipeOptions,
    RieszSpec,
    Z95,
    estimate_aipw,
    estimate_aipw_sn,
    estimate_direct,
    estimate_ipw,
    estimate_ipw_sn,
    estimate_tmle,
    estimate_tmle_logistic,
    riesz_values,
    run_recipe,
    truncate,
)
from clearner.models import fit_ols, scale_outcomes


def _toy(seed=0, n=400):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, 3))
    pi = expit(0.4 + x @ np.array([0.8, -0.5, 0.2]))
    a = (r.random(n) < pi).astype(float)
    y = 210.0 + x @ np.array([20.0, 10.0, 5.0]) + r.standard_normal(n)
    return Dataset(x=x, a=a, y=y, true_pi=pi, truth=210.0)


def _oracle_fit(ds):
    return NuisanceFit(
        pi_hat=lambda x: np.asarray(ds.true_pi),
        mu_hat=lambda x: 210.0 + x @ np.array([20.0, 10.0, 5.0]),
    )


class TestCoreFormulas:
    def test_direct_is_plugin_mean(self):
        ds = _toy(1)
        fit = _oracle_fit(ds)
        res = estimate_direct(ds, fit)
        npt.assert_allclose(res.psi_hat, fit.mu_hat(ds.x).mean(), rtol=1e-14)

    def test_ipw_hand_formula(self):
        ds = _toy(2)
        res = estimate_ipw(ds, _oracle_fit(ds))
        hand = np.mean(np.where(ds.a == 1.0, ds.y / ds.true_pi, 0.0))
        npt.assert_allclose(res.psi_hat, hand, rtol=1e-14)

    def test_ipw_sn_is_hajek(self):
        ds = _toy(3)
        res = estimate_ipw_sn(ds, _oracle_fit(ds))
        w = np.where(ds.a == 1.0, 1.0 / ds.true_pi, 0.0)
        npt.assert_allclose(res.psi_hat, (w * ds.y)[ds.a == 1.0].sum() / w.sum(), rtol=1e-14)
        assert res.diagnostics["sn_denominator"] == pytest.approx(w.mean())

    def test_aipw_hand_formula(self):
        ds = _toy(4)
        fit = _oracle_fit(ds)
        res = estimate_aipw(ds, fit)
        mu = fit.mu_hat(ds.x)
        corr = np.where(ds.a == 1.0, (ds.y - mu) / ds.true_pi, 0.0)
        npt.assert_allclose(res.psi_hat, mu.mean() + corr.mean(), rtol=1e-13)

    def test_epsilon_star_minimizes_weighted_squares(self):
        # the targeting step is the exact minimizer of the treated
        # least-squares fluctuation criterion along 1/pi; the criterion is
        # a parabola in epsilon, so three evaluations pin its vertex to
        # machine precision (a value-based line search cannot: the valley
        # floor flattens below float resolution around 1e-9 away)
        ds = _toy(5)
        fit = _oracle_fit(ds)
        res = estimate_tmle(ds, fit)
        mu = fit.mu_hat(ds.x)
        h = 1.0 / np.asarray(ds.true_pi)

        def crit(e):
            return float((((ds.y - mu - e * h) ** 2) * ds.a).sum())

        quad = (crit(1.0) + crit(-1.0)) / 2.0 - crit(0.0)
        slope = (crit(1.0) - crit(-1.0)) / 2.0
        vertex = -slope / (2.0 * quad)
        npt.assert_allclose(res.diagnostics["epsilon_star"], vertex, atol=1e-10)
        brent = minimize_scalar(crit, bracket=(-10.0, 10.0))
        npt.assert_allclose(res.diagnostics["epsilon_star"], brent.x, atol=1e-7)

    def test_constant_propensity_tmle_equals_aipw_sn(self):
        ds = _toy(6)
        fit = NuisanceFit(
            pi_hat=lambda x: np.full(x.shape[0], 0.55),
            mu_hat=lambda x: 200.0 + x @ np.array([15.0, 8.0, 1.0]),
        )
        t = estimate_tmle(ds, fit)
        s = estimate_aipw_sn(ds, fit)
        npt.assert_allclose(t.psi_hat, s.psi_hat, rtol=1e-12)
        npt.assert_allclose(t.variance, s.variance, rtol=1e-12)

    def test_ipw_requires_treated_rows(self):
        ds = Dataset(x=np.ones((5, 1)), a=np.zeros(5), y=np.zeros(5))
        fit = NuisanceFit(pi_hat=lambda x: np.full(5, 0.5), mu_hat=lambda x: np.zeros(5))
        with pytest.raises(EstimError, match="treated"):
            estimate_ipw(ds, fit)

    def test_nuisance_shape_mismatch_rejected(self):
        ds = _toy(7, n=50)
        bad = NuisanceFit(pi_hat=lambda x: np.full(3, 0.5), mu_hat=lambda x: np.zeros(50))
        with pytest.raises(EstimError, match="one value per row"):
            estimate_direct(ds, bad)

    def test_non_mmo_spec_rejected_where_unsupported(self):
        ds = _toy(8, n=50)
        with pytest.raises(EstimError, match="mean-missing-outcome"):
            estimate_ipw(ds, _oracle_fit(ds), spec=RieszSpec(kind="full_ate"))


class TestConfidenceIntervals:
    def test_symmetric_at_z95(self):
        ds = _toy(9)
        res = estimate_aipw(ds, _oracle_fit(ds))
        half = Z95 * math.sqrt(res.variance)
        npt.assert_allclose(res.ci_high - res.psi_hat, half, rtol=1e-12)
        npt.assert_allclose(res.psi_hat - res.ci_low, half, rtol=1e-12)

    def test_variance_is_influence_variance_over_n(self):
        ds = _toy(10)
        fit = _oracle_fit(ds)
        res = estimate_direct(ds, fit)
        mu = fit.mu_hat(ds.x)
        npt.assert_allclose(res.variance, mu.var() / len(mu), rtol=1e-12)


class TestTruncation:
    def test_lower_bound_only(self):
        pi = np.array([0.01, 0.2, 0.95])
        npt.assert_allclose(truncate(pi, 0.05), [0.05, 0.2, 0.95])

    def test_invalid_levels(self):
        for eta in (0.0, -0.1, 0.5, 0.7):
            with pytest.raises(EstimError, match="truncation level"):
                truncate(np.array([0.5]), eta)


class TestRieszValues:
    def test_mean_missing_outcome(self):
        a = np.array([1.0, 0.0])
        pi = np.array([0.25, 0.5])
        npt.assert_allclose(riesz_values(MMO, pi, a, None), [4.0, 0.0])

    def test_policy_rule_is_evaluated(self):
        spec = RieszSpec(kind="policy_value", policy=lambda x: (x[:, 0] > 0).astype(float))
        x = np.array([[1.0], [-1.0]])
        a = np.array([1.0, 0.0])
        pi = np.array([0.5, 0.25])
        npt.assert_allclose(riesz_values(spec, pi, a, x), [2.0, 1.0 / 0.75])

    def test_policy_spec_requires_rule(self):
        with pytest.raises(EstimError, match="policy"):
            riesz_values(RieszSpec(kind="policy_value"), np.array([0.5]), np.array([1.0]), None)


class TestPluginInvariance:
    def test_constrained_outcome_model_makes_correction_vanish(self):
        # once the weighted eval residual is pinned at zero, AIPW built on
        # the constrained model collapses onto the plain plug-in
        ds = _toy(11, n=300)
        treated = ds.a == 1.0
        h = np.where(treated, 1.0 / ds.true_pi, 0.0)
        cfit = solve_constrained_ols(
            ds.x[treated], ds.y[treated], h[treated], ds.x, ds.y, h
        )
        fit = NuisanceFit(
            pi_hat=lambda x: np.asarray(ds.true_pi),
            mu_hat=lambda x, m=cfit.model: m.predict(x),
        )
        plug = estimate_direct(ds, fit)
        debiased = estimate_aipw(ds, fit)
        npt.assert_allclose(debiased.psi_hat, plug.psi_hat, atol=1e-10)


class TestLogisticTargeting:
    def test_zero_epsilon_when_model_already_calibrated(self):
        ds = _toy(12, n=200)
        scaling, _ = scale_outcomes(ds.y[ds.a == 1.0])
        mu_s = np.clip(scaling.transform(ds.y), 1e-6, 1 - 1e-6)
        fit = NuisanceFit(
            pi_hat=lambda x: np.asarray(ds.true_pi),
            mu_hat=lambda x, v=mu_s: v,
        )
        res = estimate_tmle_logistic(ds, fit, scaling)
        assert res.diagnostics["epsilon"] == 0.0

    def test_targeting_score_zeroed(self):
        ds = _toy(13, n=300)
        scaling, _ = scale_outcomes(ds.y[ds.a == 1.0])
        lin = fit_ols(ds.x[ds.a == 1.0], ds.y[ds.a == 1.0], intercept=True)
        mu_s = np.clip(scaling.transform(lin.predict(ds.x)), 1e-6, 1 - 1e-6)
        fit = NuisanceFit(
            pi_hat=lambda x: np.asarray(ds.true_pi),
            mu_hat=lambda x, v=mu_s: v,
        )
        res = estimate_tmle_logistic(ds, fit, scaling)
        assert abs(res.diagnostics["foc_residual"]) < 1e-10
        assert scaling.y_min <= res.psi_hat <= scaling.y_max


class TestCrossfit:
    def test_two_fold_direct_matches_hand_computation(self):
        ds = gen_kang_schafer(KsConfig(n=120, seed=(77, 0)))
        folds = make_folds(ds.n, 2, seed=3)
        opts = RecipeOptions(outcome_intercept=True)
        res = run_recipe("direct", ds, folds=folds, options=opts)
        psis = []
        influence = np.empty(ds.n)
        for j in range(2):
            tr, ev = folds.train_idx(j), folds.eval_idx(j)
            tr_treated = tr[ds.a[tr] == 1.0]
            m = fit_ols(ds.x[tr_treated], ds.y[tr_treated], intercept=True)
            mu = m.predict(ds.x[ev])
            psis.append(mu.mean())
            influence[ev] = mu
        npt.assert_allclose(res.psi_hat, np.mean(psis), rtol=1e-13)
        npt.assert_allclose(res.variance, influence.var() / ds.n, rtol=1e-12)

    def test_per_fold_diagnostics_have_fold_count(self):
        ds = gen_kang_schafer(KsConfig(n=90, seed=(78, 0)))
        folds = make_folds(ds.n, 3, seed=4)
        res = run_recipe("aipw", ds, folds=folds, options=RecipeOptions())
        assert len(res.diagnostics["per_fold"]) == 3

    def test_fold_plan_size_mismatch_rejected(self):
        ds = gen_kang_schafer(KsConfig(n=100, seed=(79, 0)))
        with pytest.raises(EstimError, match="fold plan"):
            run_recipe("direct", ds, folds=make_folds(80, 2, seed=5))

    def test_unknown_recipe_rejected(self):
        ds = gen_kang_schafer(KsConfig(n=60, seed=(80, 0)))
        with pytest.raises(EstimError, match="unknown recipe"):
            run_recipe("banana", ds)

    def test_registry_is_complete(self):
        expected = {
            "direct",
            "ipw",
            "ipw_sn",
            "aipw",
            "aipw_sn",
            "tmle",
            "tmle_l",
            "clearner_linear",
            "clearner_l",
            "clearner_gbrt",
            "clearner_mlp",
            "lagrangian_gbrt",
            "dual_clearner",
            "dual_clearner_sn",
            "param_fluc",
            "param_fluc_sn",
        }
        assert set(RECIPES) == expected


class TestRecipeRows:
    def test_clearner_linear_constraint_diagnostic(self):
        ds = gen_kang_schafer(KsConfig(n=200, seed=(4242, 5)))
        opts = RecipeOptions(
            outcome_features=(0, 1, 3), outcome_intercept=False, propensity_intercept=False
        )
        res = run_recipe("clearner_linear", ds, options=opts)
        assert res.diagnostics["constraint_residual"] <= 1e-8 * res.diagnostics["constraint_scale"]

    def test_truncation_propagates_to_min_pi(self):
        ds = gen_kang_schafer(KsConfig(n=200, seed=(4242, 6)))
        opts = RecipeOptions(
            outcome_features=(0, 1, 3),
            outcome_intercept=False,
            propensity_intercept=False,
            trunc_eta=0.05,
        )
        res = run_recipe("ipw", ds, options=opts)
        assert res.diagnostics["min_pi"] >= 0.05
