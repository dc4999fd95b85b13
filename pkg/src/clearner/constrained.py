"""Equality-constrained solvers behind the constrained-learning recipes.

Contains the closed-form constrained least squares (linear outcome models),
a generic augmented-Lagrangian solver for smooth problems with one equality
constraint, the constrained fractional-logistic fit, the dual propensity
solver (balance constraint on the propensity model), and a two-step
parametric fluctuation of fitted propensities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_expit

from clearner.models import LinearModel, LogisticModel, RankDeficientError, _newton_logistic


class SolverError(RuntimeError):
    """A constrained solve failed."""


class BudgetError(SolverError):
    """Iteration budget exhausted; carries the best iterate seen."""

    def __init__(self, msg: str, theta: np.ndarray, residual: float):
        super().__init__(msg)
        self.theta = theta
        self.residual = residual


class DegenerateDirectionError(SolverError):
    """The constraint direction has no leverage over the model class."""


@dataclass(frozen=True)
class ConstrainedFit:
    """Result of an equality-constrained solve.

    ``residual`` is the achieved constraint value and ``multiplier`` the
    final Lagrange multiplier (the closed-form lambda for the linear case).
    """

    model: object | None
    multiplier: float
    residual: float
    iterations: int
    theta: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)


def clever_covariate(a, pi_values, kind: str = "mean_missing_outcome", policy_values=None) -> np.ndarray:
    """Per-row weighting covariate for the chosen functional.

    ``mean_missing_outcome`` gives A/pi; ``full_ate`` gives
    A/pi - (1-A)/(1-pi); ``policy_value`` mixes the two with per-row policy
    weights. Entries are exactly zero wherever the representer vanishes.
    """
    a = np.asarray(a, dtype=float).ravel()
    pi = np.asarray(pi_values, dtype=float).ravel()
    if kind == "mean_missing_outcome":
        h = np.zeros_like(a)
        treated = a == 1.0
        h[treated] = 1.0 / pi[treated]
        return h
    if kind == "full_ate":
        if np.any((pi >= 1.0) & (a == 0.0)):
            raise SolverError("pi = 1 on a control row; 1/(1-pi) undefined")
        return np.where(a == 1.0, 1.0 / pi, -1.0 / (1.0 - pi))
    if kind == "policy_value":
        if policy_values is None:
            raise SolverError("policy_value requires per-row policy weights")
        c = np.asarray(policy_values, dtype=float).ravel()
        h = np.zeros_like(a)
        treated = a == 1.0
        h[treated] = c[treated] / pi[treated]
        control = ~treated
        active = control & (c != 1.0)
        if np.any(pi[active] >= 1.0):
            raise SolverError("pi = 1 on a control row; 1/(1-pi) undefined")
        h[active] = (1.0 - c[active]) / (1.0 - pi[active])
        return h
    raise SolverError(f"unknown clever-covariate kind: {kind!r}")


def solve_constrained_ols(x_tr, y_tr, h_tr, x_ev, y_ev, h_ev) -> ConstrainedFit:
    """Least squares on the train rows, with the weighted eval residual pinned to zero.

    The solution is plain OLS against the pseudo-labels y + lambda*h, with
    lambda chosen so that h_ev . (y_ev - x_ev theta) = 0.
    """
    x_tr = np.atleast_2d(np.asarray(x_tr, dtype=float))
    x_ev = np.atleast_2d(np.asarray(x_ev, dtype=float))
    y_tr = np.asarray(y_tr, dtype=float).ravel()
    y_ev = np.asarray(y_ev, dtype=float).ravel()
    h_tr = np.asarray(h_tr, dtype=float).ravel()
    h_ev = np.asarray(h_ev, dtype=float).ravel()

    gram = x_tr.T @ x_tr
    try:
        np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        eig = np.linalg.eigvalsh(gram)
        cond = math.inf if eig[-1] <= 0 or eig[0] <= 0 else float(eig[-1] / eig[0])
        raise RankDeficientError(f"singular Gram matrix on the train split (cond~{cond:.3e})", cond) from None

    theta_ols = np.linalg.solve(gram, x_tr.T @ y_tr)
    direction = np.linalg.solve(gram, x_tr.T @ h_tr)
    den = float(h_ev @ (x_ev @ direction))
    hh = float(h_ev @ h_ev)
    if abs(den) < 1e-12 * hh:
        raise DegenerateDirectionError(
            f"constraint direction has no leverage (denominator {den:.3e} vs scale {hh:.3e})"
        )
    num = float(h_ev @ (y_ev - x_ev @ theta_ols))
    lam = num / den
    theta = theta_ols + lam * direction
    residual = float(h_ev @ (y_ev - x_ev @ theta))
    return ConstrainedFit(
        model=LinearModel(coef=theta, intercept_used=False),
        multiplier=lam,
        residual=residual,
        iterations=0,
        theta=theta,
        diagnostics={"theta_ols": theta_ols},
    )


def _descend(fun, x0, grad_tol, max_iter, window: int = 10):
    """Gradient descent: Barzilai-Borwein steps, nonmonotone Armijo backtracking.

    The Armijo test (c=1e-4) compares against the largest of the last
    ``window`` values so BB steps are rarely truncated. Returns
    (x, f, g, used, floored); ``floored`` means sixty halvings could not
    certify a decrease, i.e. the iterate reached the resolution limit of
    the objective in double precision rather than the gradient tolerance.
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = fun(x)
    history = [f]
    step = 1.0 / max(1.0, float(np.linalg.norm(g)))
    used = 0
    floored = False
    f_best = f
    f_window = f
    x_best, g_best = x.copy(), g.copy()
    since_best = 0
    for _ in range(max_iter):
        if float(np.linalg.norm(g)) <= grad_tol:
            break
        used += 1
        d = -g
        t = step
        f_ref = max(history[-window:])
        accepted = False
        for _ in range(60):
            xn = x + t * d
            fn, gn = fun(xn)
            if np.isfinite(fn) and fn <= f_ref + 1e-4 * t * float(g @ d):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            floored = True
            break
        s = xn - x
        yv = gn - g
        sty = float(s @ yv)
        step = float(s @ s) / sty if sty > 1e-16 else min(2.0 * t, 1e6)
        x, f, g = xn, fn, gn
        history.append(f)
        if f < f_best - 1e-12 * (1.0 + abs(f_best)):
            f_best = f
            x_best, g_best = x.copy(), g.copy()
            since_best = 0
        else:
            if f < f_best:
                f_best, x_best, g_best = f, x.copy(), g.copy()
            since_best += 1
            if since_best >= 50:
                # BB steps are cycling at the resolution limit; stop here.
                floored = True
                x, f, g = x_best, f_best, g_best
                break
        if used % 50 == 0:
            # Cumulative check: a crawl whose 50-iteration gain rounds to
            # nothing will not reach any tighter rung either.
            if f_window - f_best <= 1e-11 * (1.0 + abs(f_best)):
                floored = True
                x, f, g = x_best, f_best, g_best
                break
            f_window = f_best
    return x, f, g, used, floored


def augmented_lagrangian(
    objective,
    constraint,
    theta0,
    tol: float = 1e-8,
    max_outer: int = 30,
    inner_budget: int = 1000,
    constraint_scale: float = 1.0,
) -> ConstrainedFit:
    """Minimize a smooth objective subject to one smooth equality constraint.

    Both hooks map theta to (value, gradient). Success requires
    |constraint| <= tol * constraint_scale together with stationarity of
    the Lagrangian at the updated multiplier; the inner exit gradient is
    exactly that quantity, since grad_AL(theta; lam, rho) = grad f +
    (lam + rho c) grad c and the multiplier update is lam + rho c. Inner
    solves run against a tolerance ladder tightening one decade per outer
    round down to tol * (1 + ||grad_AL(theta0)||); at the final rung an
    exit at the line search's certification floor counts as stationary
    (a gradient test below double-precision resolution is vacuous). The
    quadratic-penalty weight starts at 1 and is multiplied by 10 whenever
    two consecutive infeasible rounds shrink the constraint by less than 2x.
    """
    theta = np.asarray(theta0, dtype=float).copy()

    def al_fun(th, lam, rho):
        fv, fg = objective(th)
        cv, cg = constraint(th)
        val = fv + lam * cv + 0.5 * rho * cv * cv
        grad = fg + (lam + rho * cv) * cg
        return val, grad

    lam = 0.0
    rho = 1.0
    _, gal0 = al_fun(theta, lam, rho)
    grad_ref = 1.0 + float(np.linalg.norm(gal0))
    grad_tol = tol * grad_ref
    ctol = tol * max(constraint_scale, 1e-300)
    ladder = 1e-2 * grad_ref

    used = 0
    c0, _ = constraint(theta)
    c_prev = abs(float(c0))
    best_theta = theta.copy()
    best_resid = float(c0)

    for _ in range(max_outer):
        gtol_k = max(grad_tol, ladder)
        round_cap = min(150, inner_budget - used)
        theta, _, g_in, inner_used, floored = _descend(
            lambda th: al_fun(th, lam, rho), theta, gtol_k, max_iter=round_cap
        )
        used += inner_used
        cval = float(constraint(theta)[0])
        if abs(cval) < abs(best_resid):
            best_theta = theta.copy()
            best_resid = cval
        gnorm = float(np.linalg.norm(g_in))
        capped = inner_used >= round_cap and not floored and gnorm > gtol_k
        if capped:
            # The rung was not reached within this round's slice; retry it
            # with fresh step-size state (restarts break BB cycling) and
            # leave the multiplier and penalty alone, since a constraint
            # value at an unconverged iterate says nothing about them.
            if used >= inner_budget:
                raise BudgetError(
                    f"augmented-Lagrangian budget exhausted ({used} inner iterations, "
                    f"best |constraint| {abs(best_resid):.3e})",
                    best_theta,
                    best_resid,
                )
            continue
        lam += rho * cval
        stationary = gnorm <= grad_tol or (floored and gtol_k == grad_tol)
        if abs(cval) <= ctol and stationary:
            return ConstrainedFit(
                model=None,
                multiplier=lam,
                residual=cval,
                iterations=used,
                theta=theta,
                diagnostics={"penalty": rho, "grad_norm": gnorm},
            )
        if used >= inner_budget:
            raise BudgetError(
                f"augmented-Lagrangian budget exhausted ({used} inner iterations, "
                f"best |constraint| {abs(best_resid):.3e})",
                best_theta,
                best_resid,
            )
        # Escalate only when two consecutive rounds were infeasible and the
        # shrink between them was under 2x: that is genuine dual-ascent
        # stagnation. A bounce off the feasibility floor after a rung
        # tightening must not stiffen the inner problem.
        if abs(cval) > ctol and c_prev > ctol and abs(cval) > 0.5 * c_prev and rho < 1e12:
            rho *= 10.0
        c_prev = abs(cval)
        # A floored round means the rung is already below what the surface
        # resolves, so drop straight to the final rung for the verdict.
        ladder = grad_tol if floored else ladder * 0.1

    raise BudgetError(
        f"augmented-Lagrangian did not reach feasibility in {max_outer} outer rounds "
        f"(best |constraint| {abs(best_resid):.3e})",
        best_theta,
        best_resid,
    )


def _column_scales(x: np.ndarray) -> np.ndarray:
    s = x.std(axis=0)
    s[s == 0.0] = 1.0
    return s


def solve_clearner_logistic(x_tr, ytil_tr, x_ev, ytil_ev, h_ev) -> ConstrainedFit:
    """Fractional-logistic fit with the weighted eval residual constrained to zero.

    Outcomes must already be scaled to [0, 1]. Columns are rescaled to unit
    standard deviation inside the solver (an exact reparameterization) and
    the returned coefficients are mapped back to the raw columns.
    """
    x_tr = np.atleast_2d(np.asarray(x_tr, dtype=float))
    x_ev = np.atleast_2d(np.asarray(x_ev, dtype=float))
    ytil_tr = np.asarray(ytil_tr, dtype=float).ravel()
    ytil_ev = np.asarray(ytil_ev, dtype=float).ravel()
    h_ev = np.asarray(h_ev, dtype=float).ravel()
    if not (((ytil_tr >= 0) & (ytil_tr <= 1)).all() and ((ytil_ev >= 0) & (ytil_ev <= 1)).all()):
        raise SolverError("scaled outcomes must lie in [0, 1]")

    scales = _column_scales(x_tr)
    dtr = x_tr / scales
    dev = x_ev / scales

    def objective(th):
        eta = dtr @ th
        val = -float(ytil_tr @ log_expit(eta) + (1.0 - ytil_tr) @ log_expit(-eta))
        grad = -(dtr.T @ (ytil_tr - expit(eta)))
        return val, grad

    def constraint(th):
        p = expit(dev @ th)
        val = float(h_ev @ (ytil_ev - p))
        grad = -(dev.T @ (h_ev * p * (1.0 - p)))
        return val, grad

    theta0, _, _, _ = _newton_logistic(dtr, ytil_tr, np.ones_like(ytil_tr))
    cscale = float(np.abs(h_ev).sum())
    fit = augmented_lagrangian(objective, constraint, theta0, constraint_scale=max(cscale, 1e-12))
    coef = fit.theta / scales
    return ConstrainedFit(
        model=LogisticModel(coef=coef, intercept_used=False),
        multiplier=fit.multiplier,
        residual=fit.residual,
        iterations=fit.iterations,
        theta=coef,
        diagnostics={"constraint_scale": cscale, **fit.diagnostics},
    )


def solve_dual_propensity(x, a, mu_hat_values) -> ConstrainedFit:
    """Logistic propensity fit constrained to balance the fitted outcomes.

    Maximizes the Bernoulli likelihood of the treatment labels subject to
    sum_i A_i mu_i exp(-x_i beta) = sum_i (1 - A_i) mu_i, which is the
    balance identity P_n[(1 - A/pi) mu] = 0 rewritten without the sigmoid.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    a = np.asarray(a, dtype=float).ravel()
    mu = np.asarray(mu_hat_values, dtype=float).ravel()
    if a.min() == a.max():
        raise SolverError("both treated and control rows are required")

    scales = _column_scales(x)
    d = x / scales

    def objective(b):
        eta = d @ b
        val = -float(a @ log_expit(eta) + (1.0 - a) @ log_expit(-eta))
        grad = -(d.T @ (a - expit(eta)))
        return val, grad

    control_side = float((1.0 - a) @ mu)

    def constraint(b):
        # Clip keeps rho * c^2 finite while the solver explores; any
        # optimum has |d @ b| orders of magnitude below the bound.
        w = a * mu * np.exp(-np.clip(d @ b, -200.0, 200.0))
        val = float(w.sum()) - control_side
        grad = -(d.T @ w)
        return val, grad

    beta0, _, _, _ = _newton_logistic(d, a, np.ones_like(a))
    cscale = float(np.abs(mu).sum())
    fit = augmented_lagrangian(objective, constraint, beta0, constraint_scale=max(cscale, 1e-12))
    coef = fit.theta / scales
    model = LogisticModel(coef=coef, intercept_used=False)
    pi_c = model.predict_proba(x)
    balance = float(np.mean((1.0 - a / pi_c) * mu))
    return ConstrainedFit(
        model=model,
        multiplier=fit.multiplier,
        residual=fit.residual,
        iterations=fit.iterations,
        theta=coef,
        diagnostics={"balance_residual": balance, "constraint_scale": cscale, **fit.diagnostics},
    )


_CLAMP_LO = 1e-6
_CLAMP_HI = 1.0 - 1e-6


def _nelder_mead(fun, x0):
    res = minimize(
        fun,
        np.asarray(x0, dtype=float),
        method="Nelder-Mead",
        options={"maxfev": 2000, "maxiter": 2000, "xatol": 1e-10, "fatol": 1e-12},
    )
    if not res.success:
        raise SolverError(f"simplex search did not converge: {res.message}")
    return res.x, int(res.nfev)


def solve_param_fluc(x, a, pi_hat, mu_hat_values) -> ConstrainedFit:
    """Two-step parametric fluctuation of fitted propensities.

    Step 1 tilts pi along H = (1 - pi) mu by maximum likelihood (scalar
    lambda). Step 2 maximizes the weighted log-calibration objective over
    the family omega = pi + (1 - pi) (lambda . [1, mu]); the (1 - pi)
    factor cancels the weight in the derivative, so the first-order
    condition is exactly the outcome-balance identity
    sum(A v / omega) = sum(v) for v = [1, mu]. Propensities are clamped
    to (1e-6, 1 - 1e-6) inside likelihood evaluations only.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    a = np.asarray(a, dtype=float).ravel()
    pi = np.asarray(pi_hat, dtype=float).ravel()
    mu = np.asarray(mu_hat_values, dtype=float).ravel()
    n = a.shape[0]

    h1 = (1.0 - pi) * mu

    def step1_neg_loglik(lam):
        w = np.clip(pi + lam[0] * h1, _CLAMP_LO, _CLAMP_HI)
        return -float(a @ np.log(w) + (1.0 - a) @ np.log1p(-w))

    lam1, nfev1 = _nelder_mead(step1_neg_loglik, [0.0])
    omega1 = pi + float(lam1[0]) * h1

    v = np.column_stack([np.ones(n), mu])
    v_dir = v * (1.0 - pi)[:, None]
    log_omega1 = np.log(np.clip(omega1, _CLAMP_LO, _CLAMP_HI))
    inv_one_minus_pi = 1.0 / np.clip(1.0 - pi, _CLAMP_LO, None)

    def step2_neg(lam):
        w = np.clip(pi + v_dir @ lam, _CLAMP_LO, _CLAMP_HI)
        gain = a * (np.log(w) - log_omega1) * inv_one_minus_pi
        return -float(gain.sum() - (v @ lam).sum())

    lam2, nfev2 = _nelder_mead(step2_neg, [0.0, 0.0])
    omega = pi + v_dir @ lam2
    if np.any(omega[a == 1.0] <= 0.0):
        raise SolverError("fluctuated propensity nonpositive on treated rows")

    w_clamped = np.clip(omega, _CLAMP_LO, _CLAMP_HI)
    foc = (v * (a / w_clamped)[:, None]).sum(axis=0) - v.sum(axis=0)
    foc_scale = np.abs(v).sum(axis=0)
    residual = float(np.max(np.abs(foc) / np.maximum(foc_scale, 1e-12)))
    balance = float(np.mean((1.0 - a / w_clamped) * mu))
    return ConstrainedFit(
        model=None,
        multiplier=float(lam1[0]),
        residual=residual,
        iterations=nfev1 + nfev2,
        theta=np.asarray(lam2, dtype=float),
        diagnostics={
            "omega": omega,
            "omega_step1": omega1,
            "balance_residual": balance,
            "foc": foc,
        },
    )
