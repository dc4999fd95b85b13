"""Estimator catalog with cross-fitting, truncation, and variance/CI rules.

All estimators target the mean missing outcome E[Y(1)] unless a different
Riesz specification is passed. Points and confidence intervals follow the
same convention throughout: psi_hat +/- z * sqrt(variance) with z = 1.959964,
where the variance is the empirical variance of per-row influence values
divided by n (pooled across folds under cross-fitting).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.special import expit

from clearner.constrained import (
    clever_covariate,
    solve_constrained_ols,
    solve_clearner_logistic,
    solve_dual_propensity,
    solve_param_fluc,
)
from clearner.datagen import Dataset, FoldPlan
from clearner.models import (
    LinearModel,
    OutcomeScaling,
    fit_fractional_logistic,
    fit_logistic,
    fit_ols,
    scale_outcomes,
)

Z95 = 1.959964


class EstimError(ValueError):
    """An estimator received inputs it cannot handle."""


@dataclass(frozen=True)
class RieszSpec:
    """Which linear functional is being estimated.

    ``kind`` is one of ``mean_missing_outcome``, ``full_ate``,
    ``policy_value``; the latter needs a per-row policy rule ``policy(x)``
    with values in [0, 1].
    """

    kind: str = "mean_missing_outcome"
    policy: Callable | None = None


MMO = RieszSpec()


@dataclass(frozen=True)
class NuisanceFit:
    """Evaluable nuisance pair; ``pi_hat``/``mu_hat`` map covariates to values."""

    pi_hat: Callable
    mu_hat: Callable
    tags: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EstimateResult:
    psi_hat: float
    variance: float
    ci_low: float
    ci_high: float
    diagnostics: dict = field(default_factory=dict)


def truncate(pi_values, eta: float):
    """Raise propensities below ``eta`` up to ``eta`` (lower bound only)."""
    if not 0.0 < eta < 0.5:
        raise EstimError(f"truncation level must lie in (0, 0.5), got {eta}")
    return np.maximum(np.asarray(pi_values, dtype=float), eta)


def riesz_values(spec: RieszSpec, pi_hat, a, x) -> np.ndarray:
    """Per-row representer values for the functional in ``spec``."""
    pi = np.asarray(pi_hat(x) if callable(pi_hat) else pi_hat, dtype=float).ravel()
    policy = None
    if spec.kind == "policy_value":
        if spec.policy is None:
            raise EstimError("policy_value spec requires a policy rule")
        policy = np.asarray(spec.policy(x), dtype=float).ravel()
    return clever_covariate(a, pi, kind=spec.kind, policy_values=policy)


def _finish(psi: float, var: float, diag: dict) -> EstimateResult:
    var = max(float(var), 0.0)
    half = Z95 * math.sqrt(var)
    return EstimateResult(
        psi_hat=float(psi),
        variance=var,
        ci_low=float(psi - half),
        ci_high=float(psi + half),
        diagnostics=diag,
    )


def _pi_diag(pi: np.ndarray) -> dict:
    lo = float(pi.min())
    return {"min_pi": lo, "max_inv_pi": float(1.0 / lo) if lo > 0 else math.inf}


def _treated_weighted(w, y, treated):
    """w * y on treated rows, exactly zero elsewhere (never touches control y)."""
    out = np.zeros_like(w)
    out[treated] = w[treated] * y[treated]
    return out


def _eval_arrays(eval_data: Dataset, fit: NuisanceFit):
    x, a, y = eval_data.x, eval_data.a, eval_data.y
    pi = np.asarray(fit.pi_hat(x), dtype=float).ravel()
    mu = np.asarray(fit.mu_hat(x), dtype=float).ravel()
    if pi.shape != a.shape or mu.shape != a.shape:
        raise EstimError("nuisance functions must return one value per row")
    return x, a, y, pi, mu


# ---------------------------------------------------------------------------
# Core formulas shared by the public operations and the recipe engine. Each
# returns (psi, influence_rows, diagnostics).


def _direct_core(mu):
    return float(mu.mean()), mu.copy(), {}


def _ipw_core(a, y, pi):
    treated = a == 1.0
    if not treated.any():
        raise EstimError("IPW needs at least one treated row")
    w = np.zeros_like(a)
    w[treated] = 1.0 / pi[treated]
    contrib = _treated_weighted(w, y, treated)
    return float(contrib.mean()), contrib, {}


def _ipw_sn_core(a, y, pi):
    treated = a == 1.0
    if not treated.any():
        raise EstimError("IPW-SN needs at least one treated row")
    w = np.zeros_like(a)
    w[treated] = 1.0 / pi[treated]
    sn = float(w.mean())
    if sn == 0.0:
        raise EstimError("zero self-normalization denominator")
    contrib = _treated_weighted(w, y, treated) / sn
    return float(contrib.mean()), contrib, {"sn_denominator": sn}


def _aipw_core(a, y, pi, mu):
    treated = a == 1.0
    h = np.zeros_like(a)
    h[treated] = 1.0 / pi[treated]
    resid = _treated_weighted(h, y - mu, treated)
    phi = resid + mu
    return float(phi.mean()), phi, {}


def _aipw_sn_core(a, y, pi, mu):
    treated = a == 1.0
    h = np.zeros_like(a)
    h[treated] = 1.0 / pi[treated]
    sn = float(h.mean())
    if sn == 0.0:
        raise EstimError("zero self-normalization denominator")
    eps = float(_treated_weighted(h, y - mu, treated).mean()) / sn
    mu_star = mu + eps
    phi = _treated_weighted(h, y - mu_star, treated) + mu_star
    return float(mu_star.mean()), phi, {"epsilon": eps}


def _tmle_core(a, y, pi, mu):
    treated = a == 1.0
    h = np.zeros_like(a)
    h[treated] = 1.0 / pi[treated]
    den = float((h * h).mean())
    if den == 0.0:
        raise EstimError("zero targeting denominator (no treated rows)")
    eps = float(_treated_weighted(h, y - mu, treated).mean()) / den
    mu_star = mu + eps / pi
    phi = _treated_weighted(h, y - mu_star, treated) + mu_star
    return float(mu_star.mean()), phi, {"epsilon_star": eps}


def _require_mmo(spec: RieszSpec, what: str):
    if spec.kind != "mean_missing_outcome":
        raise EstimError(f"{what} is implemented for the mean-missing-outcome functional only")


def estimate_direct(eval_data: Dataset, fit: NuisanceFit, spec: RieszSpec = MMO) -> EstimateResult:
    """Plug-in mean of the fitted outcome model."""
    _, a, _, pi, mu = _eval_arrays(eval_data, fit)
    psi, phi, diag = _direct_core(mu)
    return _finish(psi, phi.var() / len(a), {**diag, **_pi_diag(pi)})


def estimate_ipw(eval_data: Dataset, fit: NuisanceFit, spec: RieszSpec = MMO) -> EstimateResult:
    _require_mmo(spec, "estimate_ipw")
    _, a, y, pi, _ = _eval_arrays(eval_data, fit)
    psi, phi, diag = _ipw_core(a, y, pi)
    return _finish(psi, phi.var() / len(a), {**diag, **_pi_diag(pi)})


def estimate_ipw_sn(eval_data: Dataset, fit: NuisanceFit, spec: RieszSpec = MMO) -> EstimateResult:
    _require_mmo(spec, "estimate_ipw_sn")
    _, a, y, pi, _ = _eval_arrays(eval_data, fit)
    psi, phi, diag = _ipw_sn_core(a, y, pi)
    return _finish(psi, phi.var() / len(a), {**diag, **_pi_diag(pi)})


def estimate_aipw(eval_data: Dataset, fit: NuisanceFit, spec: RieszSpec = MMO) -> EstimateResult:
    _require_mmo(spec, "estimate_aipw")
    _, a, y, pi, mu = _eval_arrays(eval_data, fit)
    psi, phi, diag = _aipw_core(a, y, pi, mu)
    return _finish(psi, phi.var() / len(a), {**diag, **_pi_diag(pi)})


def estimate_aipw_sn(eval_data: Dataset, fit: NuisanceFit, spec: RieszSpec = MMO) -> EstimateResult:
    _require_mmo(spec, "estimate_aipw_sn")
    _, a, y, pi, mu = _eval_arrays(eval_data, fit)
    psi, phi, diag = _aipw_sn_core(a, y, pi, mu)
    return _finish(psi, phi.var() / len(a), {**diag, **_pi_diag(pi)})


def estimate_tmle(eval_data: Dataset, fit: NuisanceFit, spec: RieszSpec = MMO) -> EstimateResult:
    """Targeted step with the explicit least-squares fluctuation mu + eps/pi."""
    _require_mmo(spec, "estimate_tmle")
    _, a, y, pi, mu = _eval_arrays(eval_data, fit)
    psi, phi, diag = _tmle_core(a, y, pi, mu)
    return _finish(psi, phi.var() / len(a), {**diag, **_pi_diag(pi)})


def _solve_logistic_fluctuation(logit0, h, ys, a, tol=1e-10, max_iter=200):
    """Root of the treated targeting score sum(a*h*(ys - expit(logit0 + e*h))).

    Newton with an expanding bracket and bisection fallback; the score is
    strictly decreasing in e, so a sign-changing bracket always pins the root.
    """
    treated = a == 1.0
    ht = h[treated]
    lt = logit0[treated]
    yt = ys[treated]

    def score(e):
        return float(np.sum(ht * (yt - expit(lt + e * ht))))

    def dscore(e):
        p = expit(lt + e * ht)
        return -float(np.sum(ht * ht * p * (1.0 - p)))

    scale = float(np.abs(ht).sum())
    if scale == 0.0:
        return 0.0, 0.0
    s0 = score(0.0)
    if abs(s0) <= tol * scale:
        return 0.0, s0
    # expand a bracket [lo, hi] with score(lo) > 0 > score(hi)
    step = 1.0
    if s0 > 0:
        lo, hi = 0.0, step
        while score(hi) > 0:
            hi *= 2.0
            if hi > 1e12:
                raise EstimError("logistic fluctuation solver failed to bracket the root")
    else:
        lo, hi = -step, 0.0
        while score(lo) < 0:
            lo *= 2.0
            if lo < -1e12:
                raise EstimError("logistic fluctuation solver failed to bracket the root")
    e = 0.0
    for _ in range(max_iter):
        s = score(e)
        if s > 0:
            lo = e
        else:
            hi = e
        if abs(s) <= tol * scale:
            return e, s
        d = dscore(e)
        e_new = e - s / d if d < 0 else math.nan
        if not (lo < e_new < hi):
            e_new = 0.5 * (lo + hi)
        if hi - lo <= 1e-15 * (1.0 + abs(e)):
            return e_new, score(e_new)
        e = e_new
    s = score(e)
    if abs(s) <= 1e-6 * scale:
        return e, s
    raise EstimError(f"logistic fluctuation solver did not converge (score {s:.3e})")


def _tmle_l_core(a, y, pi, mu_s, scaling):
    """Shared math for the logistic-link targeted step on scaled outcomes."""
    n = len(a)
    treated = a == 1.0
    ys = np.zeros_like(a)
    ys[treated] = scaling.transform(y[treated])
    h = 1.0 / pi
    clipped = np.clip(mu_s, 1e-12, 1.0 - 1e-12)
    logit0 = np.log(clipped) - np.log1p(-clipped)
    eps, score = _solve_logistic_fluctuation(logit0, h, ys, a)
    mu_star = np.asarray(scaling.inverse(expit(logit0 + eps * h)), dtype=float)
    psi = float(mu_star.mean())
    hw = np.zeros_like(a)
    hw[treated] = h[treated]
    phi = _treated_weighted(hw, y - mu_star, treated) + mu_star
    diag = {"epsilon": eps, "foc_residual": score / n}
    return psi, phi, diag


def estimate_tmle_logistic(
    eval_data: Dataset, fit: NuisanceFit, scaling: OutcomeScaling, spec: RieszSpec = MMO
) -> EstimateResult:
    """Targeted step under the logistic link on margin-scaled outcomes.

    ``fit.mu_hat`` must return scaled-space predictions in (0, 1). The
    fluctuation shifts the model logit along 1/pi; the fitted shift zeroes
    the treated targeting score, and predictions are mapped back through
    ``scaling`` before the plug-in.
    """
    _require_mmo(spec, "estimate_tmle_logistic")
    _, a, y, pi, mu_s = _eval_arrays(eval_data, fit)
    psi, phi, diag = _tmle_l_core(a, y, pi, mu_s, scaling)
    return _finish(psi, phi.var() / len(a), {**diag, **_pi_diag(pi)})


# ---------------------------------------------------------------------------
# Recipe engine: named estimator pipelines over (train, eval) index pairs.


@dataclass(frozen=True)
class RecipeOptions:
    """Model-class choices shared by the recipe pipelines.

    ``outcome_features`` selects covariate columns for the outcome model
    (None means all); intercept flags default to True and are switched off
    for the benchmark replications. ``trunc_eta`` applies lower truncation
    to fitted propensities everywhere they are used. ``gbrt``/``mlp`` carry
    the boosted-tree and network settings; ``seed`` feeds row subsampling
    and shuffling so replications stay deterministic.
    """

    outcome_features: tuple | None = None
    outcome_intercept: bool = True
    propensity_intercept: bool = True
    propensity_l1: float = 0.0
    trunc_eta: float | None = None
    scale_alpha: float = 0.1
    gbrt: object | None = None
    gbrt_grid: tuple | None = None
    mlp: object | None = None
    seed: int = 0


def _outcome_cols(dataset: Dataset, opts: RecipeOptions, idx):
    x = dataset.x[idx]
    if opts.outcome_features is None:
        return x
    return x[:, list(opts.outcome_features)]


def _propensity_model(dataset: Dataset, tr_idx, opts: RecipeOptions, shared):
    key = ("prop", tr_idx.tobytes())
    if shared is not None and key in shared:
        return shared[key]
    model = fit_logistic(
        dataset.x[tr_idx],
        dataset.a[tr_idx],
        intercept=opts.propensity_intercept,
        l1=opts.propensity_l1,
    )
    if shared is not None:
        shared[key] = model
    return model


def _pi_values(model, dataset: Dataset, idx, opts: RecipeOptions):
    pi = model.predict_proba(dataset.x[idx])
    if opts.trunc_eta is not None:
        pi = truncate(pi, opts.trunc_eta)
    return pi


def _outcome_model(dataset: Dataset, tr_idx, opts: RecipeOptions, shared):
    key = ("outcome", tr_idx.tobytes())
    if shared is not None and key in shared:
        return shared[key]
    treated = tr_idx[dataset.a[tr_idx] == 1.0]
    if treated.size == 0:
        raise EstimError("no treated rows on the train split")
    model = fit_ols(
        _outcome_cols(dataset, opts, treated),
        dataset.y[treated],
        intercept=opts.outcome_intercept,
    )
    if shared is not None:
        shared[key] = model
    return model


def _mu_values(model, dataset: Dataset, idx, opts: RecipeOptions):
    return np.asarray(model.predict(_outcome_cols(dataset, opts, idx)), dtype=float).ravel()


def _seed_key(*parts) -> tuple:
    # default_rng wants a flat sequence of ints; options may carry tuple seeds.
    out: list[int] = []
    for part in parts:
        if isinstance(part, (tuple, list)):
            out.extend(int(q) for q in part)
        else:
            out.append(int(part))
    return tuple(out)


def _gbrt_mode(opts: RecipeOptions) -> bool:
    return opts.gbrt is not None or opts.gbrt_grid is not None


def _gbrt_params(dataset, tr_idx, ev_idx, opts, shared, fold_id):
    from clearner import gbrt

    if opts.gbrt is not None:
        return opts.gbrt
    if not opts.gbrt_grid:
        raise EstimError("gbrt recipes need params or a nonempty grid")
    key = ("gbrt_params", tr_idx.tobytes(), ev_idx.tobytes())
    if shared is not None and key in shared:
        return shared[key]
    tr_t = _treated_split(dataset, tr_idx)
    ev_t = _treated_split(dataset, ev_idx)
    params = gbrt.grid_search(
        (dataset.x[tr_t], dataset.y[tr_t]),
        (dataset.x[ev_t], dataset.y[ev_t]),
        opts.gbrt_grid,
        seed=_seed_key(opts.seed, fold_id, 7),
    )
    if shared is not None:
        shared[key] = params
    return params


def _gbrt_outcome_model(dataset, tr_idx, ev_idx, opts, shared, fold_id):
    # Plain squared-loss fit: the outcome nuisance behind direct/AIPW/TMLE
    # when boosted models are requested, stopped on treated-eval MSE.
    from clearner import gbrt

    key = ("outcome_gbrt", tr_idx.tobytes(), ev_idx.tobytes())
    if shared is not None and key in shared:
        return shared[key]
    params = _gbrt_params(dataset, tr_idx, ev_idx, opts, shared, fold_id)
    tr_t = _treated_split(dataset, tr_idx)
    ev_t = _treated_split(dataset, ev_idx)
    model = gbrt.boost_fit(
        (dataset.x[tr_t], dataset.y[tr_t]),
        (dataset.x[ev_t], dataset.y[ev_t]),
        params,
        gbrt.squared_loss_gradient,
        seed=_seed_key(opts.seed, fold_id, 11),
    )
    if shared is not None:
        shared[key] = model
    return model


def _mu_eval(dataset, tr_idx, ev_idx, opts, shared, fold_id):
    if _gbrt_mode(opts):
        model = _gbrt_outcome_model(dataset, tr_idx, ev_idx, opts, shared, fold_id)
        return np.asarray(model.predict(dataset.x[ev_idx]), dtype=float).ravel()
    out = _outcome_model(dataset, tr_idx, opts, shared)
    return _mu_values(out, dataset, ev_idx, opts)


def _fold_direct(dataset, tr_idx, ev_idx, opts, shared, fold_id):
    mu = _mu_eval(dataset, tr_idx, ev_idx, opts, shared, fold_id)
    psi, phi, diag = _direct_core(mu)
    return psi, phi, diag


def _weighting_fold(core):
    def fold(dataset, tr_idx, ev_idx, opts, shared, fold_id):
        prop = _propensity_model(dataset, tr_idx, opts, shared)
        pi = _pi_values(prop, dataset, ev_idx, opts)
        a = dataset.a[ev_idx]
        y = dataset.y[ev_idx]
        psi, phi, diag = core(a, y, pi)
        return psi, phi, {**diag, **_pi_diag(pi)}

    return fold


def _residual_fold(core):
    def fold(dataset, tr_idx, ev_idx, opts, shared, fold_id):
        prop = _propensity_model(dataset, tr_idx, opts, shared)
        pi = _pi_values(prop, dataset, ev_idx, opts)
        mu = _mu_eval(dataset, tr_idx, ev_idx, opts, shared, fold_id)
        a = dataset.a[ev_idx]
        y = dataset.y[ev_idx]
        psi, phi, diag = core(a, y, pi, mu)
        return psi, phi, {**diag, **_pi_diag(pi)}

    return fold


def _treated_split(dataset, idx):
    treated = idx[dataset.a[idx] == 1.0]
    if treated.size == 0:
        raise EstimError("fold without treated rows")
    return treated


def _fold_clearner_linear(dataset, tr_idx, ev_idx, opts, shared, fold_id):
    prop = _propensity_model(dataset, tr_idx, opts, shared)
    tr_t = _treated_split(dataset, tr_idx)
    ev_t = _treated_split(dataset, ev_idx)
    x_tr = _outcome_cols(dataset, opts, tr_t)
    x_ev = _outcome_cols(dataset, opts, ev_t)
    if opts.outcome_intercept:
        x_tr = np.column_stack([np.ones(len(tr_t)), x_tr])
        x_ev = np.column_stack([np.ones(len(ev_t)), x_ev])
    h_tr = 1.0 / _pi_values(prop, dataset, tr_t, opts)
    h_ev = 1.0 / _pi_values(prop, dataset, ev_t, opts)
    cfit = solve_constrained_ols(x_tr, dataset.y[tr_t], h_tr, x_ev, dataset.y[ev_t], h_ev)

    pi = _pi_values(prop, dataset, ev_idx, opts)
    a = dataset.a[ev_idx]
    y = dataset.y[ev_idx]
    x_full = _outcome_cols(dataset, opts, ev_idx)
    if opts.outcome_intercept:
        x_full = np.column_stack([np.ones(len(ev_idx)), x_full])
    mu_c = x_full @ cfit.theta
    psi = float(mu_c.mean())
    treated = a == 1.0
    hw = np.zeros_like(a)
    hw[treated] = 1.0 / pi[treated]
    phi = _treated_weighted(hw, y - mu_c, treated) + mu_c
    scale = float(np.abs(h_ev).sum()) * max(1.0, float(np.abs(dataset.y[ev_t]).max()))
    diag = {
        "lambda_hat": cfit.multiplier,
        "constraint_residual": cfit.residual,
        "constraint_scale": scale,
        **_pi_diag(pi),
    }
    return psi, phi, diag


def _fold_tmle_l(dataset, tr_idx, ev_idx, opts, shared, fold_id):
    prop = _propensity_model(dataset, tr_idx, opts, shared)
    tr_t = _treated_split(dataset, tr_idx)
    scaling, ys_tr = scale_outcomes(dataset.y[tr_t], alpha=opts.scale_alpha)
    frac = fit_fractional_logistic(
        _outcome_cols(dataset, opts, tr_t), ys_tr, intercept=opts.outcome_intercept
    )
    pi = _pi_values(prop, dataset, ev_idx, opts)
    mu_s = np.asarray(frac.predict_proba(_outcome_cols(dataset, opts, ev_idx)), dtype=float).ravel()
    a = dataset.a[ev_idx]
    y = dataset.y[ev_idx]
    psi, phi, diag = _tmle_l_core(a, y, pi, mu_s, scaling)
    return psi, phi, {**diag, **_pi_diag(pi)}


def _fold_clearner_l(dataset, tr_idx, ev_idx, opts, shared, fold_id):
    prop = _propensity_model(dataset, tr_idx, opts, shared)
    tr_t = _treated_split(dataset, tr_idx)
    ev_t = _treated_split(dataset, ev_idx)
    scaling, ys_tr = scale_outcomes(dataset.y[tr_t], alpha=opts.scale_alpha)
    ys_ev = np.clip(scaling.transform(dataset.y[ev_t]), 0.0, 1.0)
    h_ev = 1.0 / _pi_values(prop, dataset, ev_t, opts)
    cfit = solve_clearner_logistic(
        _outcome_cols(dataset, opts, tr_t), ys_tr, _outcome_cols(dataset, opts, ev_t), ys_ev, h_ev
    )
    pi = _pi_values(prop, dataset, ev_idx, opts)
    a = dataset.a[ev_idx]
    y = dataset.y[ev_idx]
    mu_c = np.asarray(
        scaling.inverse(cfit.model.predict_proba(_outcome_cols(dataset, opts, ev_idx))), dtype=float
    ).ravel()
    psi = float(mu_c.mean())
    treated = a == 1.0
    hw = np.zeros_like(a)
    hw[treated] = 1.0 / pi[treated]
    phi = _treated_weighted(hw, y - mu_c, treated) + mu_c
    diag = {
        "lambda_hat": cfit.multiplier,
        "constraint_residual": cfit.residual,
        "constraint_scale": cfit.diagnostics.get("constraint_scale"),
        **_pi_diag(pi),
    }
    return psi, phi, diag


def _fold_dual(self_normalized: bool):
    def fold(dataset, tr_idx, ev_idx, opts, shared, fold_id):
        mu_ev = _mu_eval(dataset, tr_idx, ev_idx, opts, shared, fold_id)
        a = dataset.a[ev_idx]
        y = dataset.y[ev_idx]
        x = dataset.x[ev_idx]
        cfit = solve_dual_propensity(x, a, mu_ev)
        pi_c = np.asarray(cfit.model.predict_proba(x), dtype=float).ravel()
        treated = a == 1.0
        w = np.zeros_like(a)
        w[treated] = 1.0 / pi_c[treated]
        contrib = _treated_weighted(w, y, treated)
        if self_normalized:
            sn = float(w.mean())
            if sn == 0.0:
                raise EstimError("zero self-normalization denominator")
            psi = float(contrib.mean()) / sn
        else:
            psi = float(contrib.mean())
        phi = _treated_weighted(w, y - mu_ev, treated) + mu_ev
        diag = {
            "constraint_residual": cfit.diagnostics["balance_residual"],
            "constraint_scale": float(np.abs(mu_ev).mean()),
            "multiplier": cfit.multiplier,
            **_pi_diag(pi_c),
        }
        return psi, phi, diag

    return fold


def _fold_param_fluc(self_normalized: bool):
    def fold(dataset, tr_idx, ev_idx, opts, shared, fold_id):
        prop = _propensity_model(dataset, tr_idx, opts, shared)
        out = _outcome_model(dataset, tr_idx, opts, shared)
        pi = _pi_values(prop, dataset, ev_idx, opts)
        mu = _mu_values(out, dataset, ev_idx, opts)
        a = dataset.a[ev_idx]
        y = dataset.y[ev_idx]
        cfit = solve_param_fluc(dataset.x[ev_idx], a, pi, mu)
        omega = np.asarray(cfit.diagnostics["omega"], dtype=float).ravel()
        treated = a == 1.0
        w = np.zeros_like(a)
        w[treated] = 1.0 / omega[treated]
        contrib = _treated_weighted(w, y, treated)
        if self_normalized:
            sn = float(w.mean())
            if sn == 0.0:
                raise EstimError("zero self-normalization denominator")
            psi = float(contrib.mean()) / sn
            phi = contrib / sn
        else:
            psi = float(contrib.mean())
            phi = contrib
        diag = {
            "constraint_residual": cfit.residual,
            "balance_residual": cfit.diagnostics["balance_residual"],
            "multiplier": cfit.multiplier,
            "min_pi": float(pi.min()),
            "max_inv_pi": float((1.0 / pi).max()),
        }
        return psi, phi, diag

    return fold


def _fold_gbrt(lagrangian_only: bool):
    def fold(dataset, tr_idx, ev_idx, opts, shared, fold_id):
        from clearner import gbrt

        prop = _propensity_model(dataset, tr_idx, opts, shared)
        train = dataset.subset(tr_idx)
        ev = dataset.subset(ev_idx)

        def pi_fn(x, m=prop):
            pi = m.predict_proba(x)
            return truncate(pi, opts.trunc_eta) if opts.trunc_eta is not None else pi

        params = _gbrt_params(dataset, tr_idx, ev_idx, opts, shared, fold_id)
        model = gbrt.clearner_boost(
            train, ev, ev, pi_fn, params, seed=_seed_key(opts.seed, fold_id), skip_stage2=lagrangian_only
        )
        pi_ev = pi_fn(ev.x)
        mu_c = model.predict(ev.x)
        psi = float(mu_c.mean())
        treated = ev.a == 1.0
        hw = np.zeros_like(ev.a)
        hw[treated] = 1.0 / pi_ev[treated]
        phi = _treated_weighted(hw, ev.y - mu_c, treated) + mu_c
        diag = {
            "constraint_residual": model.diagnostics["constraint_residual"],
            "stage2_tol": model.diagnostics["stage2_tol"],
            "stage1_rounds": model.diagnostics["stage1_rounds"],
            "stage2_rounds": model.diagnostics["stage2_rounds"],
            "params": params,
            **_pi_diag(pi_ev),
        }
        return psi, phi, diag

    return fold


def _fold_mlp(dataset, tr_idx, ev_idx, opts, shared, fold_id):
    from clearner import mlp as mlp_mod
    from dataclasses import replace as _dc_replace

    prop = _propensity_model(dataset, tr_idx, opts, shared)
    pi_ev = _pi_values(prop, dataset, ev_idx, opts)
    train = dataset.subset(tr_idx)
    ev = dataset.subset(ev_idx)
    cfg = opts.mlp if opts.mlp is not None else mlp_mod.TrainConfig()
    cfg = _dc_replace(cfg, seed=_seed_key(opts.seed, fold_id, cfg.seed))
    params, net_diag = mlp_mod.train_clearner_mlp(train, ev, ev, pi_ev, cfg)
    mu_c = params.predict(ev.x)
    psi = float(mu_c.mean())
    treated = ev.a == 1.0
    hw = np.zeros_like(ev.a)
    hw[treated] = 1.0 / pi_ev[treated]
    phi = _treated_weighted(hw, ev.y - mu_c, treated) + mu_c
    diag = {"constraint_residual": net_diag["constraint_residual"], **_pi_diag(pi_ev)}
    return psi, phi, diag


RECIPES = {
    "direct": _fold_direct,
    "ipw": _weighting_fold(_ipw_core),
    "ipw_sn": _weighting_fold(_ipw_sn_core),
    "aipw": _residual_fold(_aipw_core),
    "aipw_sn": _residual_fold(_aipw_sn_core),
    "tmle": _residual_fold(_tmle_core),
    "tmle_l": _fold_tmle_l,
    "clearner_linear": _fold_clearner_linear,
    "clearner_l": _fold_clearner_l,
    "clearner_gbrt": _fold_gbrt(lagrangian_only=False),
    "clearner_mlp": _fold_mlp,
    "lagrangian_gbrt": _fold_gbrt(lagrangian_only=True),
    "dual_clearner": _fold_dual(self_normalized=False),
    "dual_clearner_sn": _fold_dual(self_normalized=True),
    "param_fluc": _fold_param_fluc(self_normalized=False),
    "param_fluc_sn": _fold_param_fluc(self_normalized=True),
}


def crossfit(
    dataset: Dataset,
    folds: FoldPlan | None,
    recipe: str,
    options: RecipeOptions | None = None,
    shared: dict | None = None,
) -> EstimateResult:
    """Run a named recipe, cross-fitted when ``folds`` is given.

    With folds, nuisances are trained on each fold's complement, constrained
    fits use the fold itself as the eval split, fold estimates are averaged,
    and the variance pools per-row influence values across folds. Without
    folds the single-split mode uses the full sample as train and eval.
    """
    if recipe not in RECIPES:
        raise EstimError(f"unknown recipe: {recipe!r}")
    opts = options if options is not None else RecipeOptions()
    n = dataset.n
    if folds is None:
        idx = np.arange(n)
        pairs = [(idx, idx)]
    else:
        if folds.n != n:
            raise EstimError("fold plan does not match dataset size")
        pairs = [(folds.train_idx(j), folds.eval_idx(j)) for j in range(folds.k)]

    fold_fn = RECIPES[recipe]
    psis = []
    influence = np.empty(n)
    per_fold = []
    for fold_id, (tr, ev) in enumerate(pairs):
        psi_k, phi_k, diag_k = fold_fn(dataset, tr, ev, opts, shared, fold_id)
        psis.append(psi_k)
        influence[ev] = phi_k
        per_fold.append(diag_k)

    psi = float(np.mean(psis))
    var = float(influence.var() / n)
    diag = {"per_fold": per_fold, "recipe": recipe}
    for key in ("min_pi", "max_inv_pi"):
        vals = [d[key] for d in per_fold if key in d]
        if vals:
            diag[key] = min(vals) if key == "min_pi" else max(vals)
    resids = [abs(d["constraint_residual"]) for d in per_fold if "constraint_residual" in d]
    if resids:
        worst = int(np.argmax(resids))
        diag["constraint_residual"] = resids[worst]
        folds_with = [d for d in per_fold if "constraint_residual" in d]
        if "constraint_scale" in folds_with[worst]:
            diag["constraint_scale"] = folds_with[worst]["constraint_scale"]
    for key in ("epsilon", "epsilon_star", "lambda_hat", "multiplier"):
        vals = [d[key] for d in per_fold if key in d]
        if vals:
            diag[key] = vals[0] if len(vals) == 1 else vals
    return _finish(psi, var, diag)


def run_recipe(
    name: str,
    dataset: Dataset,
    folds: FoldPlan | None = None,
    options: RecipeOptions | None = None,
    shared: dict | None = None,
) -> EstimateResult:
    """Convenience wrapper around :func:`crossfit`."""
    return crossfit(dataset, folds, name, options=options, shared=shared)


def with_options(options: RecipeOptions, **changes) -> RecipeOptions:
    """Copy ``options`` with the given fields replaced."""
    return replace(options, **changes)


def propensity_values(
    dataset: Dataset, options: RecipeOptions | None = None, shared: dict | None = None
) -> np.ndarray:
    """Fitted propensities on the full sample, before any truncation.

    Reuses the single-split cache entry when ``shared`` is the dict passed
    to the recipes, so overlap summaries describe the same fit the
    estimators saw.
    """
    opts = options if options is not None else RecipeOptions()
    idx = np.arange(dataset.n)
    model = _propensity_model(dataset, idx, opts, shared)
    return np.asarray(model.predict_proba(dataset.x), dtype=float).ravel()
