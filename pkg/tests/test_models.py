import numpy as np
import numpy.testing as npt
import pytest
from scipy.optimize import minimize
from scipy.special import expit

from clearner.models import (
    ConvergenceError,
    FitError,
    RankDeficientError,
    SeparationError,
    fit_fractional_logistic,
    fit_logistic,
    fit_ols,
    scale_outcomes,
)

rng = np.random.default_rng(20240817)


def _logistic_nll(d, t, beta):
    eta = d @ beta
    return float(np.sum(np.log1p(np.exp(-np.abs(eta))) + np.maximum(eta, 0.0) - t * eta))


def test_ols_matches_lstsq_oracle():
    for _ in range(20):
        n, p = 40, 3
        x = rng.standard_normal((n, p))
        y = x @ rng.standard_normal(p) + rng.standard_normal(n)
        fit = fit_ols(x, y)
        oracle, *_ = np.linalg.lstsq(x, y, rcond=None)
        npt.assert_allclose(fit.coef, oracle, rtol=1e-10)


def test_ols_intercept_and_prediction():
    x = rng.standard_normal((30, 2))
    y = 1.5 + x @ np.array([2.0, -1.0])
    fit = fit_ols(x, y, intercept=True)
    npt.assert_allclose(fit.predict(x), y, atol=1e-9)


def test_weighted_ols_matches_rescaled_problem():
    x = rng.standard_normal((25, 2))
    y = x @ np.array([1.0, 2.0]) + rng.standard_normal(25)
    w = rng.random(25) + 0.5
    fit = fit_ols(x, y, weights=w)
    sw = np.sqrt(w)
    oracle, *_ = np.linalg.lstsq(x * sw[:, None], y * sw, rcond=None)
    npt.assert_allclose(fit.coef, oracle, rtol=1e-10)


def test_ols_rank_deficiency_reported():
    x = np.column_stack([np.ones(10), np.ones(10)])
    with pytest.raises(RankDeficientError):
        fit_ols(x, np.arange(10.0))


def test_logistic_matches_bfgs_oracle():
    for trial in range(5):
        r = np.random.default_rng(trial)
        n = 300
        x = r.standard_normal((n, 3))
        beta_true = np.array([0.7, -0.4, 0.2])
        a = (r.random(n) < expit(x @ beta_true)).astype(float)
        fit = fit_logistic(x, a)
        res = minimize(lambda b: _logistic_nll(x, a, b), np.zeros(3), method="BFGS")
        npt.assert_allclose(fit.coef, res.x, atol=2e-5)
        assert fit.diagnostics["converged"]


def test_logistic_probabilities_in_range():
    x = rng.standard_normal((100, 2))
    a = (rng.random(100) < 0.4).astype(float)
    p = fit_logistic(x, a, intercept=True).predict_proba(x)
    assert ((p > 0) & (p < 1)).all()


def test_logistic_separation_raises():
    x = np.concatenate([np.full(20, -1.0), np.full(20, 1.0)])[:, None]
    a = np.concatenate([np.zeros(20), np.ones(20)])
    with pytest.raises(SeparationError):
        fit_logistic(x, a)


def test_logistic_l1_kkt_conditions():
    # Subgradient optimality: |score_j| <= l1 on zeroed coordinates and
    # score_j = -sign(beta_j) * l1 on active ones.
    r = np.random.default_rng(3)
    n = 400
    x = r.standard_normal((n, 5))
    a = (r.random(n) < expit(x[:, 0] - 0.5 * x[:, 1])).astype(float)
    l1 = 8.0
    fit = fit_logistic(x, a, l1=l1)
    score = x.T @ (a - expit(x @ fit.coef))
    for j in range(5):
        if fit.coef[j] == 0.0:
            assert abs(score[j]) <= l1 + 1e-4
        else:
            npt.assert_allclose(score[j], np.sign(fit.coef[j]) * l1, atol=1e-4)


def test_l1_shrinks_towards_zero():
    r = np.random.default_rng(4)
    x = r.standard_normal((200, 3))
    a = (r.random(200) < expit(x[:, 0])).astype(float)
    free = fit_logistic(x, a)
    heavy = fit_logistic(x, a, l1=50.0)
    assert np.abs(heavy.coef).sum() < np.abs(free.coef).sum()


def test_binary_targets_agree_across_fitters():
    r = np.random.default_rng(5)
    x = r.standard_normal((150, 2))
    a = (r.random(150) < expit(x @ np.array([0.5, -1.0]))).astype(float)
    b1 = fit_logistic(x, a).coef
    b2 = fit_fractional_logistic(x, a).coef
    npt.assert_allclose(b1, b2, atol=1e-9)


def test_fractional_logistic_scaled_columns_converge():
    # Column magnitudes in the hundreds put the score scale near 1e3; the
    # convergence test must be relative to that, not an absolute 1e-8.
    r = np.random.default_rng(6)
    n = 120
    x = np.column_stack(
        [np.exp(r.standard_normal(n) / 2), r.standard_normal(n) + 10.0, (r.standard_normal(n) + 20.0) ** 2]
    )
    t = np.clip(r.random(n), 0.0, 1.0)
    fit = fit_fractional_logistic(x, t)
    assert fit.diagnostics["converged"]
    # independent stationarity check at the returned coefficients
    score = x.T @ (t - expit(x @ fit.coef))
    score0 = x.T @ (t - 0.5)
    assert np.linalg.norm(score) <= 1e-6 * (1.0 + np.linalg.norm(score0))


def test_fractional_matches_bfgs_oracle():
    r = np.random.default_rng(7)
    x = r.standard_normal((200, 3))
    t = r.random(200)
    fit = fit_fractional_logistic(x, t)
    res = minimize(lambda b: _logistic_nll(x, t, b), np.zeros(3), method="BFGS")
    npt.assert_allclose(fit.coef, res.x, atol=2e-5)


def test_fractional_rejects_out_of_range_targets():
    with pytest.raises(FitError, match=r"\[0, 1\]"):
        fit_fractional_logistic(np.ones((3, 1)), np.array([0.5, 1.2, 0.1]))


def test_fractional_weights_validated():
    x = np.ones((3, 1))
    t = np.array([0.2, 0.5, 0.9])
    with pytest.raises(FitError):
        fit_fractional_logistic(x, t, weights=np.array([1.0, -1.0, 1.0]))


class TestOutcomeScaling:
    def test_round_trip(self):
        y = rng.standard_normal(50) * 30 + 210
        scaling, s = scale_outcomes(y)
        npt.assert_allclose(scaling.inverse(s), y, rtol=1e-12)

    def test_scaled_values_interior(self):
        y = np.array([100.0, 150.0, 300.0])
        scaling, s = scale_outcomes(y, alpha=0.1)
        assert s.min() > 0.0 and s.max() < 1.0

    def test_margins_sign_aware(self):
        scaling, _ = scale_outcomes(np.array([-10.0, 20.0]), alpha=0.1)
        assert scaling.y_min == pytest.approx(-11.0)
        assert scaling.y_max == pytest.approx(22.0)
        neg, _ = scale_outcomes(np.array([-30.0, -10.0]), alpha=0.1)
        assert neg.y_min == pytest.approx(-33.0)
        assert neg.y_max == pytest.approx(-9.0)

    def test_alpha_zero_puts_extremes_on_bounds(self):
        y = np.array([2.0, 4.0, 8.0])
        _, s = scale_outcomes(y, alpha=0.0)
        npt.assert_allclose([s.min(), s.max()], [0.0, 1.0], atol=1e-15)

    def test_constant_outcomes_with_margin_center(self):
        # Margins widen a constant positive sample into a real interval.
        scaling, s = scale_outcomes(np.full(5, 7.0), alpha=0.1)
        npt.assert_allclose(s, 0.5)
        assert scaling.y_min == pytest.approx(6.3)
        assert scaling.y_max == pytest.approx(7.7)

    def test_degenerate_range_rejected(self):
        with pytest.raises(FitError, match="constant"):
            scale_outcomes(np.full(5, 7.0), alpha=0.0)
        with pytest.raises(FitError, match="constant"):
            scale_outcomes(np.zeros(3))

    def test_non_finite_rejected(self):
        with pytest.raises(FitError):
            scale_outcomes(np.array([1.0, np.inf]))
