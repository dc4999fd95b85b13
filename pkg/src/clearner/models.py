"""Unconstrained nuisance models: OLS, (fractional) logistic regression, outcome scaling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit


class FitError(ValueError):
    """A model fit failed or received invalid inputs."""


class RankDeficientError(FitError):
    def __init__(self, msg: str, cond: float = math.inf):
        super().__init__(msg)
        self.cond = cond


class SeparationError(FitError):
    """Logistic coefficients diverging; the classes look separable."""


class ConvergenceError(FitError):
    def __init__(self, msg: str, score_norm: float):
        super().__init__(msg)
        self.score_norm = score_norm


def _design(x: np.ndarray, intercept: bool) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if intercept:
        return np.column_stack([np.ones(x.shape[0]), x])
    return x


@dataclass(frozen=True)
class LinearModel:
    """Linear predictor; ``coef[0]`` is the intercept when one was fit."""

    coef: np.ndarray
    intercept_used: bool

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.intercept_used:
            return self.coef[0] + x @ self.coef[1:]
        return x @ self.coef


@dataclass(frozen=True)
class LogisticModel:
    """Logistic predictor with fit diagnostics."""

    coef: np.ndarray
    intercept_used: bool
    diagnostics: dict = field(default_factory=dict)

    def logit(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.intercept_used:
            return self.coef[0] + x @ self.coef[1:]
        return x @ self.coef

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return expit(self.logit(x))


def fit_ols(x, y, weights=None, intercept: bool = False) -> LinearModel:
    """Least squares, optionally weighted; raises on rank-deficient designs."""
    y = np.asarray(y, dtype=float).ravel()
    d = _design(x, intercept)
    if d.shape[0] != y.shape[0]:
        raise FitError(f"x has {d.shape[0]} rows but y has {y.shape[0]}")
    if d.shape[0] < 1:
        raise FitError("empty design")
    if weights is not None:
        w = np.asarray(weights, dtype=float).ravel()
        if w.shape != y.shape:
            raise FitError("weights length does not match y")
        if (w < 0).any():
            raise FitError("weights must be nonnegative")
        sw = np.sqrt(w)
        d = d * sw[:, None]
        y = y * sw
    coef, _, rank, sv = np.linalg.lstsq(d, y, rcond=None)
    if rank < d.shape[1]:
        cond = math.inf if sv[-1] == 0.0 else float(sv[0] / sv[-1])
        raise RankDeficientError(
            f"design is rank deficient (rank {rank} of {d.shape[1]} columns, cond~{cond:.3e})", cond
        )
    return LinearModel(coef=coef, intercept_used=intercept)


def _nll(d, t, beta, weights):
    eta = d @ beta
    ll = t * log_expit(eta) + (1.0 - t) * log_expit(-eta)
    return -float(weights @ ll)


def _newton_logistic(d, t, weights, max_iter=100, tol=1e-8, max_halvings=30):
    """Damped Newton on the (possibly fractional) logistic log-likelihood.

    Returns (beta, grad_norm, iterations, converged). Singular Hessians fall
    back to a minimum-norm least-squares step so that degenerate columns
    (e.g. all-zero covariates) do not abort the fit.
    """
    beta = np.zeros(d.shape[1])
    grad_norm = math.inf
    tol_eff = tol
    stalls = 0
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(d @ beta)
        g = d.T @ (weights * (t - p))
        grad_norm = float(np.linalg.norm(g))
        if it == 1:
            # Score scale depends on n and the column magnitudes; an absolute
            # threshold is unreachable when a column has scale in the hundreds.
            tol_eff = tol * (1.0 + grad_norm)
        if grad_norm <= tol_eff:
            return beta, grad_norm, it - 1, True
        wt = weights * p * (1.0 - p)
        h = d.T @ (d * wt[:, None])
        try:
            step = np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(h, g, rcond=None)[0]
        f0 = _nll(d, t, beta, weights)
        size = 1.0
        for _ in range(max_halvings):
            cand = beta + size * step
            if _nll(d, t, cand, weights) <= f0:
                break
            size *= 0.5
        beta = beta + size * step
        if f0 - _nll(d, t, beta, weights) <= 1e-12 * (1.0 + abs(f0)):
            stalls += 1
            if stalls >= 3:
                break  # likelihood at its floating-point floor
        else:
            stalls = 0
    p = expit(d @ beta)
    grad_norm = float(np.linalg.norm(d.T @ (weights * (t - p))))
    return beta, grad_norm, it, grad_norm <= tol_eff


def _soft_threshold(v, thr):
    return np.sign(v) * np.maximum(np.abs(v) - thr, 0.0)


def _fista_logistic(d, t, l1, intercept, max_iter=5000, tol=1e-8):
    """Proximal gradient (FISTA) for L1-penalized logistic regression.

    The intercept coordinate, when present, is left unpenalized.
    """
    p = d.shape[1]
    penalized = np.ones(p, dtype=bool)
    if intercept:
        penalized[0] = False
    lip = float(np.linalg.norm(d, 2) ** 2) / 4.0
    lip = max(lip, 1e-12)
    beta = np.zeros(p)
    z = beta.copy()
    tk = 1.0

    def grad(b):
        return -(d.T @ (t - expit(d @ b)))

    def kkt_violation(b):
        g = grad(b)
        v = np.abs(g).astype(float)
        on = penalized & (b != 0.0)
        off = penalized & (b == 0.0)
        v[on] = np.abs(g[on] + l1 * np.sign(b[on]))
        v[off] = np.maximum(np.abs(g[off]) - l1, 0.0)
        return float(np.linalg.norm(v))

    it = 0
    for it in range(1, max_iter + 1):
        g = grad(z)
        beta_new = z - g / lip
        beta_new[penalized] = _soft_threshold(beta_new[penalized], l1 / lip)
        tk_new = (1.0 + math.sqrt(1.0 + 4.0 * tk * tk)) / 2.0
        z = beta_new + ((tk - 1.0) / tk_new) * (beta_new - beta)
        beta, tk = beta_new, tk_new
        if it % 25 == 0 and kkt_violation(beta) <= tol * (1.0 + l1):
            break
    viol = kkt_violation(beta)
    return beta, viol, it, viol <= tol * (1.0 + l1)


def _separable(d: np.ndarray, t: np.ndarray) -> bool:
    """Exact test for complete separation via an LP feasibility problem.

    Complete separation holds iff some direction scores every class-1 row
    strictly positive and every class-0 row strictly negative; rescaling the
    direction turns the strict inequalities into unit margins.
    """
    from scipy.optimize import linprog

    signs = np.where(t > 0.5, -1.0, 1.0)
    res = linprog(
        np.zeros(d.shape[1]),
        A_ub=d * signs[:, None],
        b_ub=np.full(d.shape[0], -1.0),
        bounds=[(None, None)] * d.shape[1],
        method="highs",
    )
    return res.status == 0


def fit_logistic(x, a, intercept: bool = False, l1: float = 0.0) -> LogisticModel:
    """Binary logistic regression by damped Newton (L1 > 0 switches to FISTA).

    Newton runs at most 100 iterations with up to 30 step halvings and stops
    when the score norm falls below a scale-relative threshold. Separable
    classes raise :class:`SeparationError` suggesting a penalty or
    truncation; the check only runs when the fitted logits look extreme.
    """
    a = np.asarray(a, dtype=float).ravel()
    if not np.isin(a, (0.0, 1.0)).all():
        raise FitError("labels must be 0 or 1")
    if a.min() == a.max():
        raise FitError("both classes must be present to fit a propensity model")
    d = _design(x, intercept)
    if d.shape[0] != a.shape[0]:
        raise FitError(f"x has {d.shape[0]} rows but a has {a.shape[0]}")
    if l1 < 0:
        raise FitError(f"l1 penalty must be nonnegative, got {l1}")

    if l1 > 0:
        beta, viol, iters, converged = _fista_logistic(d, a, l1, intercept)
        diag = {"grad_norm": viol, "iterations": iters, "converged": converged, "l1": l1}
        return LogisticModel(coef=beta, intercept_used=intercept, diagnostics=diag)

    weights = np.ones_like(a)
    beta, grad_norm, iters, converged = _newton_logistic(d, a, weights)
    eta_max = float(np.max(np.abs(d @ beta))) if d.size else 0.0
    # Logits beyond 15 never occur in a well-posed propensity fit; only then
    # is the (exact but slower) separability test worth running.
    if (not converged and eta_max > 100.0) or (eta_max > 15.0 and _separable(d, a)):
        raise SeparationError(
            "logistic coefficients are diverging (classes look separable); "
            "consider l1 > 0 or propensity truncation"
        )
    diag = {"grad_norm": grad_norm, "iterations": iters, "converged": converged}
    return LogisticModel(coef=beta, intercept_used=intercept, diagnostics=diag)


def fit_fractional_logistic(x, y_frac, weights=None, intercept: bool = False) -> LogisticModel:
    """Logistic regression against fractional targets in [0, 1].

    Shares the Newton path with :func:`fit_logistic` (so binary targets give
    the same fit) but treats non-convergence as an error, reporting the final
    score norm.
    """
    t = np.asarray(y_frac, dtype=float).ravel()
    if not ((t >= 0.0) & (t <= 1.0)).all():
        raise FitError("fractional targets must lie in [0, 1]")
    d = _design(x, intercept)
    if d.shape[0] != t.shape[0]:
        raise FitError(f"x has {d.shape[0]} rows but y has {t.shape[0]}")
    if weights is None:
        w = np.ones_like(t)
    else:
        w = np.asarray(weights, dtype=float).ravel()
        if w.shape != t.shape:
            raise FitError("weights length does not match targets")
        if (w < 0).any():
            raise FitError("weights must be nonnegative")
    beta, grad_norm, iters, converged = _newton_logistic(d, t, w)
    if not converged:
        raise ConvergenceError(
            f"fractional logistic fit did not converge (score norm {grad_norm:.3e})", grad_norm
        )
    diag = {"grad_norm": grad_norm, "iterations": iters, "converged": True}
    return LogisticModel(coef=beta, intercept_used=intercept, diagnostics=diag)


@dataclass(frozen=True)
class OutcomeScaling:
    """Affine map of outcomes onto [0, 1] with sign-aware safety margins."""

    y_min: float
    y_max: float
    alpha: float

    def transform(self, y):
        return (np.asarray(y, dtype=float) - self.y_min) / (self.y_max - self.y_min)

    def inverse(self, s):
        return self.y_min + np.asarray(s, dtype=float) * (self.y_max - self.y_min)


def scale_outcomes(y, alpha: float = 0.1):
    """Build the margin-padded [0, 1] scaling from observed outcomes.

    The margins push ``y_min`` below the observed minimum and ``y_max`` above
    the observed maximum regardless of sign. Returns ``(scaling, scaled_y)``.
    """
    y = np.asarray(y, dtype=float).ravel()
    if y.size < 1:
        raise FitError("need at least one outcome to build a scaling")
    if not np.isfinite(y).all():
        raise FitError("outcomes must be finite")
    if alpha < 0:
        raise FitError(f"alpha must be nonnegative, got {alpha}")
    lo = float(y.min())
    hi = float(y.max())
    y_min = (1.0 - alpha) * lo if lo >= 0 else (1.0 + alpha) * lo
    y_max = (1.0 + alpha) * hi if hi >= 0 else (1.0 - alpha) * hi
    if y_max <= y_min:
        raise FitError("degenerate outcome range after margins (constant outcomes cannot be scaled)")
    scaling = OutcomeScaling(y_min=y_min, y_max=y_max, alpha=alpha)
    return scaling, scaling.transform(y)
