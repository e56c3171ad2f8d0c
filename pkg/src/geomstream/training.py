"""Training loop: MSE objective, Adam, metrics logging, best-checkpoint
selection, early stopping, and the linear no-interaction baseline."""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tensor as T
from .tensor import Tensor

DEFAULT_LR = 3e-4
DEFAULT_BATCH = 100
DEFAULT_PATIENCE = 200


class TrainingError(RuntimeError):
    pass


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = pred - Tensor(np.asarray(target, dtype=np.float64))
    return T.mul(diff, diff).mean()


def linear_baseline(p0: np.ndarray, v0: np.ndarray, p1: np.ndarray,
                    horizon: float) -> float:
    """MSE of the interaction-free prediction p0 + v0 * horizon."""
    pred = p0 + v0 * horizon
    return float(np.mean((pred - p1) ** 2))


@dataclass
class AdamState:
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients down so their global L2 norm is at most
    ``max_norm``; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState) -> None:
    """One in-place Adam update; aborts (naming the parameter) on any
    non-finite gradient so a numeric blow-up is never silently absorbed."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r} "
                                f"at step {t}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p.data[...] -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def compute_loss_and_grads(model: M.Model, types, p0, v0, p1,
                           dropout_rng=None) -> tuple[float, dict]:
    params = model.params()
    with T.Tape() as tape:
        for t in params.values():
            tape.watch(t)
        pred = M.predict_positions(model, types, p0, v0, dropout_rng=dropout_rng)
        loss = mse_loss(pred, p1)
        T.backward(loss)
        grads = {name: tape.grad(t) for name, t in params.items()}
    return float(loss.data), grads


def evaluate(model: M.Model, types, p0, v0, p1, batch: int = DEFAULT_BATCH) -> float:
    """Mean squared error over a dataset, batched, dropout off."""
    total = 0.0
    count = 0
    for lo in range(0, len(types), batch):
        hi = min(lo + batch, len(types))
        pred = M.predict_positions(model, types[lo:hi], p0[lo:hi], v0[lo:hi])
        total += float(np.sum((pred.data - p1[lo:hi]) ** 2))
        count += pred.data.size
    return total / count


@dataclass
class TrainResult:
    epochs_run: int
    best_epoch: int
    best_valid_mse: float
    final_train_loss: float
    stopped_early: bool


def train(model: M.Model, train_data, valid_data, epochs: int,
          lr: float = DEFAULT_LR, batch: int = DEFAULT_BATCH,
          patience: int = DEFAULT_PATIENCE, seed: int = 0,
          metrics_path: str | None = None,
          checkpoint_path: str | None = None,
          log_every: int = 1, use_dropout: bool = True,
          clip_norm: float | None = None,
          progress=None) -> TrainResult:
    """Adam on MSE with seeded shuffling.

    ``train_data``/``valid_data`` are (types, p0, v0, p1) array tuples.
    Per-epoch metrics go to ``metrics_path`` as ndjson; the model with the
    best validation MSE is kept in ``checkpoint_path`` and restored into
    ``model`` before returning.  Training stops early after ``patience``
    epochs without validation improvement.
    """
    types, p0, v0, p1 = train_data
    if batch > len(types):
        raise TrainingError(f"batch size {batch} exceeds training split size "
                            f"{len(types)}")
    shuffle_rng = np.random.default_rng(seed)
    dropout_rng = np.random.default_rng(seed + 1) if use_dropout else None
    opt = AdamState(lr=lr)
    params = model.params()

    best_valid = np.inf
    best_epoch = -1
    since_best = 0
    train_loss = np.nan
    epoch = 0
    t_start = time.monotonic()
    log = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        for epoch in range(1, epochs + 1):
            order = shuffle_rng.permutation(len(types))
            losses = []
            for batch_index, lo in enumerate(range(0, len(order), batch)):
                idx = order[lo:lo + batch]
                loss, grads = compute_loss_and_grads(
                    model, types[idx], p0[idx], v0[idx], p1[idx],
                    dropout_rng=dropout_rng)
                if not np.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch} "
                                        f"batch {batch_index}")
                if clip_norm is not None:
                    clip_gradients(grads, clip_norm)
                adam_step(params, grads, opt)
                losses.append(loss)
            train_loss = float(np.mean(losses))
            valid_mse = evaluate(model, *valid_data, batch=batch)
            if log is not None and (epoch % log_every == 0 or epoch == epochs):
                log.write(json.dumps({
                    "epoch": epoch,
                    "train_loss": train_loss,
                    "valid_mse": valid_mse,
                    "wallclock_s": time.monotonic() - t_start,
                }, sort_keys=True) + "\n")
                log.flush()
            if valid_mse < best_valid:
                best_valid = valid_mse
                best_epoch = epoch
                since_best = 0
                if checkpoint_path:
                    M.save_checkpoint(model, checkpoint_path)
            else:
                since_best += 1
            if progress is not None:
                progress(epoch, train_loss, valid_mse)
            if since_best >= patience:
                break
    finally:
        if log is not None:
            log.close()

    stopped = epoch < epochs
    if checkpoint_path and best_epoch >= 0:
        restored = M.load_checkpoint(checkpoint_path)
        for name, t in model.params().items():
            t.data[...] = restored.params()[name].data
    return TrainResult(epoch, best_epoch, best_valid, train_loss, stopped)


def resolve_seed(config_seed: int, env: dict | None = None) -> int:
    """GEOMF_SEED environment variable overrides the configured seed."""
    env = os.environ if env is None else env
    raw = env.get("GEOMF_SEED")
    if raw is None:
        return config_seed
    try:
        return int(raw)
    except ValueError:
        raise TrainingError(f"GEOMF_SEED={raw!r} is not an integer") from None
