"""Layer-wise network training with a built-in Adam optimizer.

Layers are trained one at a time: for layer k only that stage's parameters
are optimized (shared matrices take part in every stage), against the
batch-mean squared loss of the layer-k output.  A layer stops when the
validation metric, the worst normalized squared error over the validation
set, has not improved by more than ``tol`` for ``patience_iters``
consecutive evaluations; the best parameters seen are then frozen and the
next layer starts.

Training is deterministic: one seeded generator drives the minibatch draws,
and identical seed and config reproduce the history bit for bit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .unfolding import (
    NetworkParams,
    NetworkVariant,
    backward,
    forward,
    get_grad,
    get_param,
    layer_names,
    set_param,
)

__all__ = [
    "TrainConfig",
    "TrainData",
    "TrainHistory",
    "AdamState",
    "adam_step",
    "nmse_ratio",
    "nmse_db",
    "batch_nmse_ratios",
    "mean_nmse_db",
    "empirical_risk",
    "layerwise_train",
    "write_history_csv",
]

# dB value reported for an exactly zero error ratio.
NMSE_FLOOR_DB = -300.0

ALPHA_MIN = 1e-8


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    patience_iters: int = 5000
    tol: float = 1e-5
    n_train: int = 1000
    n_validation: int = 250
    batch_size: int = 250
    max_iters_per_layer: int = 50_000
    seed: int = 0
    eval_every: int = 10

    def __post_init__(self):
        positives = {
            "learning_rate": self.learning_rate,
            "tol": self.tol,
            "n_train": self.n_train,
            "n_validation": self.n_validation,
            "batch_size": self.batch_size,
            "max_iters_per_layer": self.max_iters_per_layer,
            "eval_every": self.eval_every,
        }
        for name, value in positives.items():
            if not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.patience_iters < 1:
            raise ValueError(f"patience_iters must be >= 1, got {self.patience_iters}")


@dataclass
class TrainData:
    """Fixed train/validation splits, samples in rows."""

    X_train: np.ndarray
    Y_train: np.ndarray
    X_val: np.ndarray
    Y_val: np.ndarray


@dataclass
class TrainHistory:
    """Per-step losses, validation metric trace and layer freeze points."""

    steps: list[int] = field(default_factory=list)
    layers: list[int] = field(default_factory=list)
    train_losses: list[float] = field(default_factory=list)
    val_steps: list[int] = field(default_factory=list)
    val_nmse_db: list[float] = field(default_factory=list)
    layer_boundaries: list[int] = field(default_factory=list)
    frozen_val_db: list[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# metrics


def nmse_ratio(x_hat: np.ndarray, x_star: np.ndarray) -> float:
    """||x_hat - x*||^2 / ||x*||^2 (linear ratio)."""
    x_hat = np.asarray(x_hat, dtype=np.float64).ravel()
    x_star = np.asarray(x_star, dtype=np.float64).ravel()
    denom = float(x_star @ x_star)
    if denom == 0.0:
        raise ValueError("NMSE is undefined for x* = 0")
    diff = x_hat - x_star
    return float(diff @ diff) / denom


def nmse_db(x_hat: np.ndarray, x_star: np.ndarray) -> float:
    """NMSE in dB; an exact match reports the -300 dB floor sentinel."""
    ratio = nmse_ratio(x_hat, x_star)
    if ratio == 0.0:
        return NMSE_FLOOR_DB
    return float(10.0 * np.log10(ratio))


def batch_nmse_ratios(X_hat: np.ndarray, X_star: np.ndarray) -> np.ndarray:
    """Per-row error ratios, restricted to rows with x* != 0."""
    X_hat = np.atleast_2d(np.asarray(X_hat, dtype=np.float64))
    X_star = np.atleast_2d(np.asarray(X_star, dtype=np.float64))
    denom = np.einsum("ij,ij->i", X_star, X_star)
    keep = denom > 0
    if not np.any(keep):
        raise ValueError("NMSE is undefined: every reference signal is zero")
    diff = X_hat[keep] - X_star[keep]
    return np.einsum("ij,ij->i", diff, diff) / denom[keep]


def mean_nmse_db(X_hat: np.ndarray, X_star: np.ndarray) -> float:
    """10 log10 of the mean error ratio over nonzero reference rows."""
    mean_ratio = float(batch_nmse_ratios(X_hat, X_star).mean())
    if mean_ratio == 0.0:
        return NMSE_FLOOR_DB
    return float(10.0 * np.log10(mean_ratio))


def empirical_risk(X_hat: np.ndarray, X_star: np.ndarray) -> float:
    """Batch mean of 1/2 ||x_hat_j - x*_j||^2."""
    X_hat = np.atleast_2d(np.asarray(X_hat, dtype=np.float64))
    X_star = np.atleast_2d(np.asarray(X_star, dtype=np.float64))
    if X_hat.shape != X_star.shape:
        raise ValueError(f"shape mismatch {X_hat.shape} vs {X_star.shape}")
    if X_hat.shape[0] == 0:
        raise ValueError("empty batch")
    diff = X_hat - X_star
    return float(0.5 * np.einsum("ij,ij->i", diff, diff).mean())


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Per-parameter first/second moments, created lazily as zeros."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: NetworkParams,
    grads,
    state: AdamState,
    learning_rate: float,
    names: list[str],
) -> None:
    """One bias-corrected Adam update of the named parameters in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name in names:
        g = np.asarray(get_grad(grads, name), dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        update = -learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
        set_param(params, name, np.asarray(get_param(params, name)) + update)


def _clamp_alphas(params: NetworkParams) -> None:
    np.maximum(params.alphas, ALPHA_MIN, out=params.alphas)


# ---------------------------------------------------------------------------
# layer-wise training loop


def _ratio_db(ratio: float) -> float:
    return NMSE_FLOOR_DB if ratio <= 0.0 else float(10.0 * np.log10(ratio))


# Variants whose stage parameters act only inside their own layer, so the
# frozen prefix can be cached instead of re-run every step.  The tied
# variants train shared matrices at every stage and need the full unroll.
_LOCAL_STAGE = {
    NetworkVariant.ALBISTA,
    NetworkVariant.UNTIED_LBISTA,
    NetworkVariant.UNTIED_LBISTA_CP,
}


def layerwise_train(
    params0: NetworkParams, data: TrainData, cfg: TrainConfig
) -> tuple[NetworkParams, TrainHistory]:
    """Train layer by layer, freezing each stage at its best validation metric.

    Minibatches are drawn with replacement from the fixed training set.
    A layer that never improves within its step budget is frozen at its
    best observed state and training advances with a warning.
    """
    if data.X_train.shape[0] < 1 or data.X_val.shape[0] < 1:
        raise ValueError("training and validation sets must be nonempty")
    params = params0.copy()
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    n_train = data.X_train.shape[0]
    global_step = 0
    local = params.variant in _LOCAL_STAGE
    prefix_train = np.zeros((n_train, params.n_x)) if local else None
    prefix_val = np.zeros((data.X_val.shape[0], params.n_x)) if local else None

    for layer in range(1, params.depth + 1):
        kidx = layer - 1
        names = layer_names(params, kidx)
        state = AdamState()

        def val_metric() -> float:
            if local:
                fp = forward(params, data.Y_val, depth=layer, start=kidx, x_init=prefix_val)
            else:
                fp = forward(params, data.Y_val, depth=layer)
            return float(batch_nmse_ratios(fp.iterates[-1], data.X_val).max())

        best_metric = val_metric()
        best_snapshot = {
            name: np.array(get_param(params, name), copy=True) for name in names
        }
        history.val_steps.append(global_step)
        history.val_nmse_db.append(_ratio_db(best_metric))
        init_metric = best_metric
        patience = 0
        steps_in_layer = 0
        while steps_in_layer < cfg.max_iters_per_layer and patience < cfg.patience_iters:
            idx = rng.integers(0, n_train, size=cfg.batch_size)
            if local:
                fp = forward(
                    params,
                    data.Y_train[idx],
                    depth=layer,
                    start=kidx,
                    x_init=prefix_train[idx],
                )
                grads = backward(params, fp, data.X_train[idx])
            else:
                fp = forward(params, data.Y_train[idx], depth=layer)
                grads = backward(params, fp, data.X_train[idx], only_layer=kidx)
            loss = empirical_risk(fp.iterates[-1], data.X_train[idx])
            adam_step(params, grads, state, cfg.learning_rate, names)
            _clamp_alphas(params)
            history.steps.append(global_step)
            history.layers.append(layer)
            history.train_losses.append(loss)
            global_step += 1
            steps_in_layer += 1
            if steps_in_layer % cfg.eval_every == 0:
                metric = val_metric()
                history.val_steps.append(global_step)
                history.val_nmse_db.append(_ratio_db(metric))
                if metric < best_metric - cfg.tol:
                    best_metric = metric
                    best_snapshot = {
                        name: np.array(get_param(params, name), copy=True)
                        for name in names
                    }
                    patience = 0
                else:
                    patience += 1
        for name, value in best_snapshot.items():
            set_param(params, name, value)
        if best_metric >= init_metric and steps_in_layer >= cfg.max_iters_per_layer:
            warnings.warn(
                f"layer {layer} did not improve within {cfg.max_iters_per_layer} steps; "
                "freezing at its best observed state",
                stacklevel=2,
            )
        if local:
            prefix_train = forward(
                params, data.Y_train, depth=layer, start=kidx, x_init=prefix_train
            ).iterates[-1]
            prefix_val = forward(
                params, data.Y_val, depth=layer, start=kidx, x_init=prefix_val
            ).iterates[-1]
        history.layer_boundaries.append(global_step)
        history.frozen_val_db.append(_ratio_db(best_metric))
    return params, history


def write_history_csv(path: str | Path, history: TrainHistory) -> None:
    """History CSV: one row per optimizer step, validation carried forward."""
    val_by_step = dict(zip(history.val_steps, history.val_nmse_db))
    with open(path, "w", encoding="utf-8") as f:
        f.write("# blockunfold-csv v1 history\n")
        f.write("step,layer,train_loss,val_nmse_db\n")
        last_val = float("nan")
        for step, layer, loss in zip(
            history.steps, history.layers, history.train_losses
        ):
            if step in val_by_step:
                last_val = val_by_step[step]
            f.write(f"{step},{layer},{loss:.17g},{last_val:.17g}\n")
