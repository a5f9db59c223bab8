"""Calibration losses and the target-network training loop.

All losses are written twice: a scalar form on one rollout's score sequence
(used for hand checks) and a batched form on padded [B, T] score arrays that
also returns the gradient w.r.t. the scores.  Scores are success
probabilities except for the cumulative loss, whose scores are running
failure sums.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .predictor import (
    Batch,
    LrSchedule,
    OptimizerState,
    Predictor,
    gradients,
    make_batch,
    optimizer_step,
    success_scores,
)
from .rollout import Dataset, Rollout, time_quantile_index

_LOG_CLAMP = 1e-7
DEFAULT_QUANTILES = (0.0, 0.2, 0.4, 0.6, 0.8)


class LossKind(str, Enum):
    TDQC = "tdqc"
    TD_LAMBDA = "td_lambda"
    BCE = "bce"
    MSE_MC = "mse_mc"
    SAFE = "safe_cumulative"


class TrainingDivergence(RuntimeError):
    """Raised when the training loss becomes non-finite."""


# --------------------------------------------------------------------------- scalar forms


def td_lambda_targets(target_scores: Sequence[float], y: float, lam: float) -> np.ndarray:
    """Backward lambda-return recursion: G_T = y, G_t = (1-lam) f-(h_{t+1}) + lam G_{t+1}.

    ``target_scores[t]`` is the frozen network's score at step t+1 (0-based);
    the first entry is never used.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    f = np.asarray(target_scores, dtype=float)
    G = np.empty_like(f)
    G[-1] = y
    for t in range(len(f) - 2, -1, -1):
        G[t] = (1.0 - lam) * f[t + 1] + lam * G[t + 1]
    return G


def td_lambda_loss(scores, target_scores, y: float, lam: float, weight: float = 1.0) -> float:
    G = td_lambda_targets(target_scores, y, lam)
    return float(weight * np.sum((np.asarray(scores, dtype=float) - G) ** 2))


def tdqc_loss(scores, target_scores, y: float, weight: float = 1.0) -> float:
    """sum_{t<T} (f(h_t) - f-(h_{t+1}))^2 + (f(h_T) - y)^2, times the rollout weight."""
    f = np.asarray(scores, dtype=float)
    g = np.asarray(target_scores, dtype=float)
    boot = np.sum((f[:-1] - g[1:]) ** 2)
    return float(weight * (boot + (f[-1] - y) ** 2))


def bce_loss(scores, y: float, weight: float = 1.0) -> float:
    """Per-step binary cross entropy against the terminal label, averaged over steps."""
    f = np.asarray(scores, dtype=float)
    ll = y * np.log(np.maximum(f, _LOG_CLAMP)) + (1.0 - y) * np.log(np.maximum(1.0 - f, _LOG_CLAMP))
    return float(-weight * ll.sum() / len(f))


def mse_mc_loss(scores, y: float, weight: float = 1.0) -> float:
    """Summed squared error against the terminal label (the lambda = 1 return)."""
    f = np.asarray(scores, dtype=float)
    return float(weight * np.sum((f - y) ** 2))


def safe_cumulative_loss(cum_scores, y_success: int, weight: float = 1.0) -> float:
    """Cumulative failure-score loss on running sums F_t in [0, t].

    Failures (``y_success == 0``) are pushed to F_t = t, successes to 0.
    """
    F = np.asarray(cum_scores, dtype=float)
    if y_success == 0:
        return float(weight * np.sum(np.arange(1, len(F) + 1) - F))
    return float(weight * np.sum(F))


def class_weights(labels: Sequence[int] | Dataset) -> tuple[float, float]:
    """Inverse class frequency weights ``(w_success, w_failure)``, w_k = N / (2 N_k)."""
    y = labels.labels if isinstance(labels, Dataset) else np.asarray(labels)
    n = len(y)
    n_succ = int(np.sum(y == 1))
    n_fail = n - n_succ
    if n_succ == 0 or n_fail == 0:
        raise ValueError("class weighting needs both labels present")
    return n / (2.0 * n_succ), n / (2.0 * n_fail)


# --------------------------------------------------------------------------- batched forms


def batch_td_targets(target_scores: np.ndarray, batch: Batch, lam: float) -> np.ndarray:
    """Padded [B, T] lambda-return targets; entries past each length are 0."""
    B, T = target_scores.shape
    G = np.zeros((B, T))
    idx = np.arange(B)
    last = batch.lengths - 1
    G[idx, last] = batch.labels
    for t in range(T - 2, -1, -1):
        live = t < last
        G[live, t] = (1.0 - lam) * target_scores[live, t + 1] + lam * G[live, t + 1]
    return G


def batch_loss(kind: LossKind, scores: np.ndarray, batch: Batch, weights: np.ndarray,
               target_scores: np.ndarray | None = None, lam: float = 0.0) -> tuple[float, np.ndarray]:
    """Weighted mean over rollouts of the per-rollout loss, and d(loss)/d(scores)."""
    mask = batch.mask
    y = batch.labels[:, None]
    w = weights[:, None] / len(weights)
    if kind in (LossKind.TDQC, LossKind.TD_LAMBDA, LossKind.MSE_MC):
        if kind == LossKind.MSE_MC:
            G = np.broadcast_to(y, scores.shape)
        else:
            G = batch_td_targets(target_scores, batch, 0.0 if kind == LossKind.TDQC else lam)
        diff = np.where(mask, scores - G, 0.0)
        return float(np.sum(w * diff**2)), 2.0 * w * diff
    if kind == LossKind.BCE:
        f = scores
        lo = np.maximum(f, _LOG_CLAMP)
        hi = np.maximum(1.0 - f, _LOG_CLAMP)
        per = -(y * np.log(lo) + (1.0 - y) * np.log(hi))
        n = batch.lengths[:, None]
        value = float(np.sum(np.where(mask, w * per / n, 0.0)))
        dper = -y / lo * (f > _LOG_CLAMP) + (1.0 - y) / hi * (1.0 - f > _LOG_CLAMP)
        return value, np.where(mask, w * dper / n, 0.0)
    if kind == LossKind.SAFE:
        steps = np.arange(1, scores.shape[1] + 1)[None, :]
        fail = (y == 0)
        per = np.where(fail, steps - scores, scores)
        value = float(np.sum(np.where(mask, w * per, 0.0)))
        return value, np.where(mask, w * np.where(fail, -1.0, 1.0), 0.0)
    raise ValueError(f"unknown loss kind {kind!r}")


# --------------------------------------------------------------------------- training


@dataclass
class TrainConfig:
    loss_kind: LossKind = LossKind.TDQC
    td_lambda: float = 0.0
    lr: float = 1e-2
    lr_step: int = 200
    lr_gamma: float = 1.0
    weight_decay: float = 0.01
    l2_reg: float = 0.0
    target_update_period: int = 10
    epochs: int = 200
    batch_rollouts: int = 0  # 0: the whole training set per step
    seed: int = 0
    class_weighting: bool = False
    eval_every: int = 1
    quantiles: tuple = DEFAULT_QUANTILES

    def __post_init__(self):
        self.loss_kind = LossKind(self.loss_kind)
        if self.target_update_period < 1:
            raise ValueError("target_update_period must be >= 1")
        if not 0.0 <= self.td_lambda <= 1.0:
            raise ValueError("td_lambda must lie in [0, 1]")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_rollouts < 0 or self.l2_reg < 0 or self.eval_every < 1:
            raise ValueError("invalid training configuration")


class TargetNetwork:
    """Frozen parameter snapshot used for bootstrap targets."""

    def __init__(self, predictor: Predictor, period: int):
        self.period = int(period)
        self.net = predictor.copy()
        self.staleness = 0

    def sync(self, predictor: Predictor) -> None:
        self.net.params = {k: v.copy() for k, v in predictor.params.items()}
        self.staleness = 0

    def tick(self, predictor: Predictor) -> bool:
        """Count one optimizer step; sync when the period is reached."""
        self.staleness += 1
        if self.staleness >= self.period:
            self.sync(predictor)
            return True
        return False

    def scores(self, X: np.ndarray) -> np.ndarray:
        out, _ = self.net.forward_batch(X)
        return self.net.scores(out)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (epoch, train_loss, val_brier, lr)
    best_epoch: int = -1
    best_val: float = math.inf

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_brier", "lr"])
        for epoch, loss, val, lr in self.rows:
            w.writerow([epoch, repr(float(loss)), "" if val is None else repr(float(val)), repr(float(lr))])
        return buf.getvalue()


def mean_sequential_brier(predictor: Predictor, rollouts: Sequence[Rollout], quantiles=DEFAULT_QUANTILES) -> float:
    """Sequential Brier averaged over a quantile grid (the model-selection criterion)."""
    preds = success_scores(predictor, rollouts)
    total = 0.0
    for q in quantiles:
        total += np.mean([(p[time_quantile_index(len(p), q) - 1] - r.label) ** 2 for p, r in zip(preds, rollouts)])
    return float(total / len(quantiles))


def _l2(predictor: Predictor, lam: float):
    value = lam * sum(float(np.sum(v * v)) for v in predictor.params.values())
    return value, {k: 2.0 * lam * v for k, v in predictor.params.items()}


def train(dataset: Dataset | Sequence[Rollout], predictor: Predictor, config: TrainConfig,
          val: Sequence[Rollout] | None = None) -> tuple[Predictor, TrainLog]:
    """Fit ``predictor`` in place; returns the validation-selected parameters and the log.

    Without a validation set the final parameters are returned.
    """
    rollouts = list(dataset)
    if not rollouts:
        raise ValueError("empty training set")
    if config.loss_kind == LossKind.SAFE and not predictor.accumulate:
        raise ValueError("the cumulative loss needs a predictor in accumulate mode")
    if config.loss_kind != LossKind.SAFE and predictor.accumulate:
        raise ValueError("accumulate mode is only meaningful with the cumulative loss")

    labels = np.array([r.label for r in rollouts], dtype=float)
    if config.class_weighting:
        w_s, w_f = class_weights(labels.astype(int))
        weights = np.where(labels == 1, w_s, w_f)
    else:
        weights = np.ones(len(rollouts))
    encoded = [predictor.encode(r) for r in rollouts]

    rng = np.random.default_rng(config.seed)
    opt = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    sched = LrSchedule(config.lr, config.lr_step, config.lr_gamma)
    bootstrapped = config.loss_kind in (LossKind.TDQC, LossKind.TD_LAMBDA)
    target = TargetNetwork(predictor, config.target_update_period) if bootstrapped else None
    log = TrainLog()
    best = None
    size = config.batch_rollouts or len(rollouts)

    for epoch in range(config.epochs):
        opt.lr = sched.rate(epoch)
        order = rng.permutation(len(rollouts))
        epoch_loss = 0.0
        for start in range(0, len(order), size):
            idx = order[start : start + size]
            batch = make_batch([encoded[i] for i in idx], labels[idx])
            tgt = target.scores(batch.X) if target is not None else None

            def loss_fn(scores, b, idx=idx, tgt=tgt):
                return batch_loss(config.loss_kind, scores, b, weights[idx], tgt, config.td_lambda)

            value, grads = gradients(predictor, batch, loss_fn)
            if config.l2_reg:
                reg, dreg = _l2(predictor, config.l2_reg)
                value += reg
                grads = {k: grads[k] + dreg[k] for k in grads}
            if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}, optimizer step {opt.step + 1}")
            optimizer_step(opt, predictor, grads)
            if target is not None:
                target.tick(predictor)
            epoch_loss += value * len(idx)
        epoch_loss /= len(rollouts)

        val_brier = None
        if val and (epoch % config.eval_every == 0 or epoch == config.epochs - 1):
            val_brier = mean_sequential_brier(predictor, val, config.quantiles)
            if val_brier < log.best_val:
                log.best_val, log.best_epoch = val_brier, epoch
                best = {k: v.copy() for k, v in predictor.params.items()}
        log.rows.append((epoch, epoch_loss, val_brier, opt.lr))

    if best is not None:
        predictor.params = best
    return predictor, log


def train_with_lr_search(dataset, make_predictor: Callable[[], Predictor], config: TrainConfig,
                         val: Sequence[Rollout], lr_grid: Sequence[float]) -> tuple[Predictor, TrainLog, float]:
    """Train once per learning rate and keep the run with the best validation Brier.

    Losses differ in scale (the cross entropy averages over steps, the
    squared-error losses sum), so a shared rate would favour one of them.
    """
    if not val:
        raise ValueError("learning-rate selection needs a validation set")
    best = None
    for lr in lr_grid:
        cfg = replace(config, lr=float(lr))
        model, log = train(dataset, make_predictor(), cfg, val)
        if best is None or log.best_val < best[1].best_val:
            best = (model, log, float(lr))
    return best
