"""Small fully-connected regressor with penalized training and exact bias shift.

The training objective is minibatch MSE on treated rows plus a penalty
lam * (eval first-order term)^2 computed full-batch on the eval split; at
every epoch end the final-layer bias is shifted so the eval first-order
term is exactly zero. All gradients are hand-rolled backprop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from clearner.datagen import Dataset


class MlpError(RuntimeError):
    """Training failed (divergence or invalid inputs)."""


@dataclass
class MLPParams:
    """Network parameters; layer l maps width[l] -> width[l+1].

    Input standardization constants ride along as non-trained parameters so
    the network is a self-contained predictor. ``theta_bias`` exposes the
    final-layer scalar bias that the exact constraint shift adjusts.
    """

    weights: list
    biases: list
    activation: str = "tanh"
    x_mean: np.ndarray | None = None
    x_sd: np.ndarray | None = None

    @property
    def theta_bias(self) -> float:
        return float(self.biases[-1][0])

    def copy(self) -> "MLPParams":
        return MLPParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activation=self.activation,
            x_mean=None if self.x_mean is None else self.x_mean.copy(),
            x_sd=None if self.x_sd is None else self.x_sd.copy(),
        )

    def predict(self, x: np.ndarray) -> np.ndarray:
        out, _ = _forward(self, np.atleast_2d(np.asarray(x, dtype=float)))
        return out


@dataclass(frozen=True)
class TrainConfig:
    """Training knobs; ``lam`` is the penalty weight on the squared eval term."""

    lam: float = 0.0
    lr: float = 1e-3
    epochs: int = 30
    batch: int = 32
    seed: int | tuple = 0
    momentum: float = 0.0
    hidden: tuple = (32, 32)

    def __post_init__(self):
        if self.lr <= 0:
            raise MlpError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 1:
            raise MlpError(f"epochs must be at least 1, got {self.epochs}")
        if self.lam < 0:
            raise MlpError(f"penalty weight must be nonnegative, got {self.lam}")


def init_params(d_in: int, hidden: tuple, seed, x_sample: np.ndarray | None = None) -> MLPParams:
    """Xavier-style random init; standardization fitted from ``x_sample``."""
    rng = np.random.default_rng(seed)
    widths = [d_in, *hidden, 1]
    weights = []
    biases = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.normal(0.0, math.sqrt(1.0 / fan_in), size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    if x_sample is not None:
        x_sample = np.atleast_2d(np.asarray(x_sample, dtype=float))
        mean = x_sample.mean(axis=0)
        sd = x_sample.std(axis=0)
        sd[sd == 0.0] = 1.0
    else:
        mean = np.zeros(d_in)
        sd = np.ones(d_in)
    return MLPParams(weights=weights, biases=biases, x_mean=mean, x_sd=sd)


def _forward(params: MLPParams, x: np.ndarray):
    if x.shape[1] != params.weights[0].shape[1]:
        raise MlpError(
            f"input width {x.shape[1]} does not match network input {params.weights[0].shape[1]}"
        )
    z = x if params.x_mean is None else (x - params.x_mean) / params.x_sd
    acts = [z]
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        z = np.tanh(z @ w.T + b)
        acts.append(z)
    out = z @ params.weights[-1].T + params.biases[-1]
    return out[:, 0], acts


def mlp_forward(params: MLPParams, x_row) -> float:
    """Scalar prediction for one input row."""
    out, _ = _forward(params, np.atleast_2d(np.asarray(x_row, dtype=float)))
    return float(out[0])


def _backprop(params: MLPParams, x: np.ndarray, out_grad: np.ndarray):
    """Gradients of sum_i out_grad[i] * f(x_i) w.r.t. every weight and bias."""
    _, acts = _forward(params, x)
    g_w = [np.zeros_like(w) for w in params.weights]
    g_b = [np.zeros_like(b) for b in params.biases]
    delta = out_grad[:, None]
    for layer in range(len(params.weights) - 1, -1, -1):
        g_w[layer] = delta.T @ acts[layer]
        g_b[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ params.weights[layer]) * (1.0 - acts[layer] ** 2)
    return g_w, g_b


def _pi_values(pi_hat, x):
    values = pi_hat(x) if callable(pi_hat) else pi_hat
    return np.asarray(values, dtype=float).ravel()


def _eval_residual(params: MLPParams, eval_data: Dataset, pi: np.ndarray):
    """First-order term P_eval[(A/pi)(Y - f)] and the weight mean P_eval[A/pi]."""
    f = params.predict(eval_data.x)
    treated = eval_data.a == 1.0
    w = np.zeros(eval_data.n)
    w[treated] = 1.0 / pi[treated]
    r = float((w[treated] * (eval_data.y[treated] - f[treated])).sum() / eval_data.n)
    return r, float(w.mean()), w


def loss_and_grad(params: MLPParams, train_batch, eval_data: Dataset, pi_hat, lam: float):
    """Objective value, parameter gradients, and the two terms separately.

    The MSE term is averaged over the minibatch; the penalty term
    lam * residual^2 uses the full eval split regardless of batching.
    """
    x_b, y_b = train_batch
    x_b = np.atleast_2d(np.asarray(x_b, dtype=float))
    y_b = np.asarray(y_b, dtype=float).ravel()
    f_b, _ = _forward(params, x_b)
    err = y_b - f_b
    mse = float(np.mean(err**2))
    g_w, g_b = _backprop(params, x_b, -2.0 * err / len(y_b))

    pi = _pi_values(pi_hat, eval_data.x)
    residual, _, w = _eval_residual(params, eval_data, pi)
    penalty = lam * residual * residual
    if lam > 0.0:
        out_grad = -2.0 * lam * residual * (w / eval_data.n)
        p_w, p_b = _backprop(params, eval_data.x, out_grad)
        for layer in range(len(g_w)):
            g_w[layer] += p_w[layer]
            g_b[layer] += p_b[layer]
    parts = {"mse": mse, "penalty": penalty, "residual": residual}
    return mse + penalty, (g_w, g_b), parts


def bias_shift(params: MLPParams, eval_data: Dataset, pi_hat) -> MLPParams:
    """Shift the final bias so the eval first-order term is exactly zero."""
    pi = _pi_values(pi_hat, eval_data.x)
    if not (eval_data.a == 1.0).any():
        raise MlpError("bias shift needs at least one treated eval row")
    residual, w_mean, _ = _eval_residual(params, eval_data, pi)
    shifted = params.copy()
    shifted.biases[-1][0] += residual / w_mean
    return shifted


def train_clearner_mlp(train: Dataset, val: Dataset, eval_data: Dataset, pi_hat, cfg: TrainConfig):
    """Penalized SGD with the exact bias shift at every epoch end.

    Minibatches cycle over treated train rows; the returned parameters are
    the epoch-end snapshot with the best treated-val MSE (every snapshot
    satisfies the eval constraint exactly, up to float roundoff).
    """
    rng = np.random.default_rng(cfg.seed)
    params = init_params(train.d, cfg.hidden, rng.integers(2**63), x_sample=train.x)
    treated_tr = np.flatnonzero(train.a == 1.0)
    treated_val = np.flatnonzero(val.a == 1.0)
    if treated_tr.size == 0 or treated_val.size == 0:
        raise MlpError("training and validation splits both need treated rows")
    pi_eval = _pi_values(pi_hat, eval_data.x)

    vel_w = [np.zeros_like(w) for w in params.weights]
    vel_b = [np.zeros_like(b) for b in params.biases]
    best = None
    best_mse = math.inf
    first_shift = None
    best_epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(treated_tr)
        for start in range(0, order.size, cfg.batch):
            batch = order[start : start + cfg.batch]
            loss, (g_w, g_b), _ = loss_and_grad(
                params, (train.x[batch], train.y[batch]), eval_data, pi_eval, cfg.lam
            )
            if not math.isfinite(loss):
                raise MlpError(f"training diverged at epoch {epoch} (non-finite loss)")
            for layer in range(len(g_w)):
                vel_w[layer] = cfg.momentum * vel_w[layer] - cfg.lr * g_w[layer]
                vel_b[layer] = cfg.momentum * vel_b[layer] - cfg.lr * g_b[layer]
                params.weights[layer] += vel_w[layer]
                params.biases[layer] += vel_b[layer]
        before = params.theta_bias
        params = bias_shift(params, eval_data, pi_eval)
        if first_shift is None:
            first_shift = abs(params.theta_bias - before)
        f_val = params.predict(val.x[treated_val])
        val_mse = float(np.mean((val.y[treated_val] - f_val) ** 2))
        if not math.isfinite(val_mse):
            raise MlpError(f"training diverged at epoch {epoch} (non-finite validation loss)")
        if val_mse < best_mse:
            best_mse = val_mse
            best = params.copy()
            best_epoch = epoch
    residual, _, _ = _eval_residual(best, eval_data, pi_eval)
    diagnostics = {
        "first_epoch_shift": first_shift,
        "best_epoch": best_epoch,
        "val_mse": best_mse,
        "constraint_residual": residual,
    }
    return best, diagnostics


def lambda_grid(eval_data: Dataset, pi_hat, lam0_values=(0.0, 1.0, 4.0, 16.0, 64.0)):
    """Penalty weights lam0 / (P_eval[A/pi])^2 for the given base values."""
    pi = _pi_values(pi_hat, eval_data.x)
    treated = eval_data.a == 1.0
    w = np.zeros(eval_data.n)
    w[treated] = 1.0 / pi[treated]
    denom = float(w.mean()) ** 2
    if denom == 0.0:
        raise MlpError("no treated eval rows; cannot scale the penalty grid")
    return tuple(v / denom for v in lam0_values)


def select_lambda(
    train: Dataset,
    val: Dataset,
    eval_data: Dataset,
    pi_hat,
    cfg: TrainConfig,
    lam0_values=(0.0, 1.0, 4.0, 16.0, 64.0),
    rule: str = "val_mse",
    slack: float = 0.10,
):
    """Train one model per penalty weight and pick one.

    ``val_mse`` keeps the best validation MSE; ``min_shift`` keeps the
    smallest first-epoch bias shift among candidates within ``slack`` of the
    best validation MSE.
    """
    entries = []
    for lam0, lam in zip(lam0_values, lambda_grid(eval_data, pi_hat, lam0_values)):
        cand_cfg = TrainConfig(
            lam=lam,
            lr=cfg.lr,
            epochs=cfg.epochs,
            batch=cfg.batch,
            seed=cfg.seed,
            momentum=cfg.momentum,
            hidden=cfg.hidden,
        )
        params, diag = train_clearner_mlp(train, val, eval_data, pi_hat, cand_cfg)
        entries.append({"lam0": lam0, "lam": lam, "params": params, **diag})
    if rule == "val_mse":
        chosen = min(range(len(entries)), key=lambda i: entries[i]["val_mse"])
    elif rule == "min_shift":
        floor = min(e["val_mse"] for e in entries)
        ok = [i for i, e in enumerate(entries) if e["val_mse"] <= (1.0 + slack) * floor]
        chosen = min(ok, key=lambda i: entries[i]["first_epoch_shift"])
    else:
        raise MlpError(f"unknown selection rule: {rule!r}")
    return chosen, entries
