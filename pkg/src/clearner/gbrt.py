"""Gradient-boosted regression trees with a two-stage constrained variant.

Stage 1 boosts the outcome model on treated train rows against a modified
pseudo-gradient that already contains the targeting correction; stage 2
keeps boosting on the eval split against the pure correction direction
until the eval first-order constraint is numerically zero or progress
stalls. Split search is exact greedy over sorted feature values; the hot
scan lives in :mod:`clearner._kernels`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from clearner import _kernels
from clearner.datagen import Dataset


class BoostError(ValueError):
    """Invalid boosting inputs."""


_STAGE2_SUBSAMPLE = 0.5


@dataclass(frozen=True)
class BoostParams:
    """Boosting knobs; ``max_trees_j`` caps stage 1 and ``max_trees_k`` stage 2."""

    eta: float = 0.1
    max_trees_j: int = 500
    max_trees_k: int = 500
    max_depth: int = 3
    colsample: float = 1.0
    subsample: float = 1.0
    early_stop_rounds: int = 20
    min_leaf: int = 5

    def __post_init__(self):
        if self.eta <= 0:
            raise BoostError(f"learning rate must be positive, got {self.eta}")
        if not (0 < self.colsample <= 1 and 0 < self.subsample <= 1):
            raise BoostError("colsample and subsample must lie in (0, 1]")
        if self.max_trees_j < 0 or self.max_trees_k < 0:
            raise BoostError("tree caps must be nonnegative")
        if self.min_leaf < 1:
            raise BoostError("min_leaf must be at least 1")


@dataclass
class RegressionTree:
    """Flat node-array tree: ``feature < 0`` marks a leaf holding ``value``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    max_depth_used: int

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=float)))
        return _kernels.tree_apply(self.feature, self.threshold, self.left, self.right, self.value, x)


def _as_row_indices(mask, n):
    if mask is None:
        return np.arange(n)
    mask = np.asarray(mask)
    if mask.dtype == bool:
        return np.flatnonzero(mask)
    return mask.astype(np.int64)


def fit_tree(x, target, row_mask=None, feature_mask=None, max_depth: int = 3, min_leaf: int = 5) -> RegressionTree:
    """Exact greedy regression tree on the masked rows and features.

    Leaf values are target means; split gain is the sum-of-squares
    reduction, ties broken by lowest feature index then lowest threshold.
    Degenerate inputs produce a single-leaf stump.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    target = np.asarray(target, dtype=float).ravel()
    rows = _as_row_indices(row_mask, x.shape[0])
    feats = _as_row_indices(feature_mask, x.shape[1])
    feats = np.sort(feats)

    feature = []
    threshold = []
    left = []
    right = []
    value = []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    max_used = 0

    def build(idx, depth):
        nonlocal max_used
        node = new_node()
        g = target[idx]
        mean = float(g.mean())
        value[node] = mean
        max_used = max(max_used, depth)
        if depth >= max_depth or idx.size < 2 * min_leaf:
            return node
        total = float(g.sum())
        parent_score = total * total / idx.size
        best_score = -math.inf
        best_feat = -1
        best_thr = 0.0
        for f in feats:
            xs = x[idx, f]
            order = np.argsort(xs, kind="stable")
            xs_sorted = np.ascontiguousarray(xs[order])
            g_sorted = np.ascontiguousarray(g[order])
            score, pos = _kernels.best_split(xs_sorted, g_sorted, min_leaf)
            if pos >= 0 and score > best_score:
                best_score = score
                best_feat = int(f)
                best_thr = 0.5 * (xs_sorted[pos] + xs_sorted[pos + 1])
        improvement = best_score - parent_score
        if best_feat < 0 or improvement <= 1e-12 * max(1.0, abs(parent_score)):
            return node
        goes_left = x[idx, best_feat] <= best_thr
        l_idx = idx[goes_left]
        r_idx = idx[~goes_left]
        if l_idx.size < min_leaf or r_idx.size < min_leaf:
            return node
        feature[node] = best_feat
        threshold[node] = float(best_thr)
        left[node] = build(l_idx, depth + 1)
        right[node] = build(r_idx, depth + 1)
        return node

    if rows.size == 0:
        node = new_node()
        value[node] = 0.0
    else:
        build(rows, 0)
    return RegressionTree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=float),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.asarray(value, dtype=float),
        max_depth_used=max_used,
    )


@dataclass
class GBRTModel:
    """Additive tree ensemble: base_score + eta * sum of tree predictions."""

    base_score: float
    eta: float
    trees: list = field(default_factory=list)  # (RegressionTree, stage tag)
    diagnostics: dict = field(default_factory=dict)

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.full(x.shape[0], self.base_score)
        for tree, _ in self.trees:
            out += self.eta * tree.predict(x)
        return out

    def copy_truncated(self, n_trees: int) -> "GBRTModel":
        return GBRTModel(
            base_score=self.base_score,
            eta=self.eta,
            trees=list(self.trees[:n_trees]),
            diagnostics=dict(self.diagnostics),
        )


def _subsample(rng, n, fraction):
    if fraction >= 1.0:
        return np.arange(n)
    m = max(1, int(round(fraction * n)))
    return np.sort(rng.choice(n, size=m, replace=False))


def _colsample(rng, d, fraction):
    if fraction >= 1.0:
        return np.arange(d)
    m = max(1, int(round(fraction * d)))
    return np.sort(rng.choice(d, size=m, replace=False))


def boost_fit(train, val, params: BoostParams, pseudo_gradient, seed=0) -> GBRTModel:
    """Boost against a pluggable pseudo-gradient with val-MSE early stopping.

    ``train`` and ``val`` are (x, y) pairs; the hook maps (model, train) to
    one target value per train row. Trees are added until ``max_trees_j`` or
    ``early_stop_rounds`` consecutive rounds without val-MSE improvement;
    the returned model is the best-validation snapshot.
    """
    x_tr, y_tr = train
    x_val, y_val = val
    x_tr = np.atleast_2d(np.asarray(x_tr, dtype=float))
    y_tr = np.asarray(y_tr, dtype=float).ravel()
    x_val = np.atleast_2d(np.asarray(x_val, dtype=float))
    y_val = np.asarray(y_val, dtype=float).ravel()
    rng = np.random.default_rng(seed)

    model = GBRTModel(base_score=float(y_tr.mean()), eta=params.eta)
    val_pred = np.full(y_val.shape[0], model.base_score)
    best_mse = float(np.mean((y_val - val_pred) ** 2))
    best_len = 0
    stall = 0
    for _ in range(params.max_trees_j):
        g = np.asarray(pseudo_gradient(model, (x_tr, y_tr)), dtype=float).ravel()
        rows = _subsample(rng, x_tr.shape[0], params.subsample)
        cols = _colsample(rng, x_tr.shape[1], params.colsample)
        tree = fit_tree(x_tr, g, rows, cols, params.max_depth, params.min_leaf)
        model.trees.append((tree, 1))
        val_pred += params.eta * tree.predict(x_val)
        mse = float(np.mean((y_val - val_pred) ** 2))
        if mse < best_mse:
            best_mse = mse
            best_len = len(model.trees)
            stall = 0
        else:
            stall += 1
            if stall >= params.early_stop_rounds:
                break
    out = model.copy_truncated(best_len)
    out.diagnostics["stage1_rounds"] = best_len
    out.diagnostics["val_mse"] = best_mse
    return out


def squared_loss_gradient(model: GBRTModel, data) -> np.ndarray:
    """Plain boosting residual hook."""
    x, y = data
    return y - model.predict(x)


def _pi_values(pi_hat, x):
    values = pi_hat(x) if callable(pi_hat) else pi_hat
    return np.asarray(values, dtype=float).ravel()


def epsilon_star(data: Dataset, model, pi_hat) -> float:
    """Targeting step size: ratio of the empirical moments on ``data``.

    ``model`` may be a GBRTModel or any object with ``predict``. Control
    rows drop out of both moments, so the ratio uses treated rows only.
    """
    pi = _pi_values(pi_hat, data.x)
    treated = data.a == 1.0
    if not treated.any():
        raise BoostError("epsilon_star needs at least one treated row")
    mu = np.asarray(model.predict(data.x), dtype=float).ravel()
    pt = pi[treated]
    num = float(((data.y[treated] - mu[treated]) / pt).sum())
    den = float((1.0 / (pt * pt)).sum())
    return num / den


def _constraint_residual(data: Dataset, mu, pi):
    treated = data.a == 1.0
    vals = np.zeros(data.n)
    vals[treated] = (data.y[treated] - mu[treated]) / pi[treated]
    return float(vals.mean())


def clearner_boost(
    train: Dataset,
    eval_data: Dataset,
    val: Dataset,
    pi_hat,
    params: BoostParams,
    seed=0,
    skip_stage2: bool = False,
) -> GBRTModel:
    """Two-stage constrained boosting.

    Stage 1 boosts on treated train rows against the modified gradient
    (residual plus the targeting correction along 1/pi), early-stopped on
    treated val MSE. Stage 2 boosts on the eval split against the pure
    correction direction, recomputing the step size each round; trees that
    fail to shrink the absolute eval constraint are rejected and stop the
    stage. The recorded ``stage2_tol`` upper-bounds the final residual.
    """
    pi_tr = _pi_values(pi_hat, train.x)
    pi_ev = _pi_values(pi_hat, eval_data.x)
    tr_treated = np.flatnonzero(train.a == 1.0)
    if tr_treated.size == 0:
        raise BoostError("no treated rows on the train split")
    if not (eval_data.a == 1.0).any():
        raise BoostError("no treated rows on the eval split")

    x_t = train.x[tr_treated]
    y_t = train.y[tr_treated]
    p_t = pi_tr[tr_treated]
    val_treated = np.flatnonzero(val.a == 1.0)
    if val_treated.size == 0:
        raise BoostError("no treated rows on the val split")

    def modified_gradient(model, data):
        x, y = data
        mu = model.predict(x)
        resid = y - mu
        num = float((resid / p_t).sum())
        den = float((1.0 / (p_t * p_t)).sum())
        eps = num / den
        return resid + eps / p_t

    model = boost_fit(
        (x_t, y_t),
        (val.x[val_treated], val.y[val_treated]),
        params,
        modified_gradient,
        seed=seed,
    )

    stage1_rounds = len(model.trees)
    y_ev_treated = eval_data.y[eval_data.a == 1.0]
    sd_y = float(y_ev_treated.std())
    tol = 1e-6 * (sd_y if sd_y > 0 else 1.0)
    rng = np.random.default_rng((seed, 977) if np.isscalar(seed) else tuple(seed) + (977,))

    mu_ev = model.predict(eval_data.x)
    resid = _constraint_residual(eval_data, mu_ev, pi_ev)
    stage2_rounds = 0
    stopped_by = "skipped" if (skip_stage2 or params.max_trees_k == 0) else "cap"
    stall = 0
    if not skip_stage2:
        for _ in range(params.max_trees_k):
            if abs(resid) < tol:
                stopped_by = "tolerance"
                break
            eps = epsilon_star(eval_data, model, pi_ev)
            target = eps / pi_ev
            rows = _subsample(rng, eval_data.n, _STAGE2_SUBSAMPLE)
            cols = _colsample(rng, eval_data.x.shape[1], params.colsample)
            tree = fit_tree(eval_data.x, target, rows, cols, params.max_depth, params.min_leaf)
            model.trees.append((tree, 2))
            mu_ev += params.eta * tree.predict(eval_data.x)
            new_resid = _constraint_residual(eval_data, mu_ev, pi_ev)
            if abs(new_resid) > abs(resid):
                model.trees.pop()
                mu_ev -= params.eta * tree.predict(eval_data.x)
                stopped_by = "rejection"
                break
            stage2_rounds += 1
            if abs(new_resid) < abs(resid):
                stall = 0
            else:
                stall += 1
            resid = new_resid
            if stall >= params.early_stop_rounds:
                stopped_by = "stall"
                break
        else:
            if abs(resid) < tol:
                stopped_by = "tolerance"

    final_resid = _constraint_residual(eval_data, model.predict(eval_data.x), pi_ev)
    recorded_tol = tol if abs(final_resid) <= tol else abs(final_resid)
    model.diagnostics.update(
        {
            "stage1_rounds": stage1_rounds,
            "stage2_rounds": stage2_rounds,
            "stage2_tol": recorded_tol,
            "stage2_target_tol": tol,
            "stage2_stopped_by": stopped_by,
            "constraint_residual": final_resid,
        }
    )
    return model


def grid_search(train, val, grid, seed=0) -> BoostParams:
    """Pick the grid entry whose plain stage-1 fit minimizes val MSE.

    ``grid`` is an iterable of BoostParams; ties keep the earliest entry.
    """
    grid = list(grid)
    if not grid:
        raise BoostError("empty hyperparameter grid")
    best = None
    best_mse = math.inf
    for cand in grid:
        model = boost_fit(train, val, cand, squared_loss_gradient, seed=seed)
        mse = model.diagnostics["val_mse"]
        if mse < best_mse:
            best_mse = mse
            best = cand
    return best
