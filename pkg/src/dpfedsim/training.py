"""Local client training: hybrid loss, AdamW, cosine restarts and the DP step."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .data import SequenceBatch, iter_batches
from .errors import ConfigError, DataError, DimensionError, NumericError
from .model import ModelParams, TstConfig, forward
from .privacy import PrivacySpec, allocate_budget, privatize_update
from .tensor import Tensor

DIRECTION_SHARPNESS = 10.0


@dataclass(frozen=True)
class HybridLossConfig:
    alpha: float = 0.5
    huber_weight: float = 0.2
    huber_delta: float = 1.0
    w_smooth: float = 0.05
    w_direction: float = 0.05
    w_temporal: float = 0.1

    def errors(self) -> list[str]:
        errs = []
        for name in ("alpha", "huber_weight", "w_smooth", "w_direction", "w_temporal"):
            if getattr(self, name) < 0:
                errs.append(f"{name} must be >= 0")
        if self.alpha > 1:
            errs.append("alpha must be <= 1")
        if not self.huber_delta > 0:
            errs.append("huber_delta must be > 0")
        return errs

    def validate(self) -> None:
        errs = self.errors()
        if errs:
            raise ConfigError("; ".join(errs))


def hybrid_loss(
    pred: Tensor,
    target,
    prev_pred=None,
    prev_target=None,
    cfg: HybridLossConfig = HybridLossConfig(),
) -> Tensor:
    """Weighted MSE/MAE/Huber plus smoothness, direction and temporal-consistency terms.

    The last three need the previous step's prediction and target; they are
    dropped when either is missing. Direction uses ``tanh`` as a smooth sign.
    """
    target = T.as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"pred {pred.shape} vs target {target.shape}")
    resid = pred - target
    loss = (
        T.square(resid).mean() * cfg.alpha
        + T.absolute(resid).mean() * (1.0 - cfg.alpha)
        + T.huber(resid, cfg.huber_delta).mean() * cfg.huber_weight
    )
    if prev_pred is None or prev_target is None:
        return loss
    prev_pred, prev_target = T.as_tensor(prev_pred), T.as_tensor(prev_target)
    if prev_pred.shape != pred.shape or prev_target.shape != pred.shape:
        raise DimensionError(f"previous-step shapes {prev_pred.shape}/{prev_target.shape} vs {pred.shape}")
    step_pred = pred - prev_pred
    step_true = target - prev_target
    agreement = T.tanh(step_pred * step_true * DIRECTION_SHARPNESS)
    return (
        loss
        + T.square(step_pred).mean() * cfg.w_smooth
        + T.relu(-agreement).mean() * cfg.w_direction
        + T.square(step_pred - step_true).mean() * cfg.w_temporal
    )


def window_loss(pred: Tensor, target, cfg: HybridLossConfig) -> Tensor:
    """Hybrid loss over a run of consecutive windows: row i-1 is the previous step of row i."""
    target = T.as_tensor(target)
    if pred.shape[0] < 2:
        return hybrid_loss(pred, target, cfg=cfg)
    return hybrid_loss(pred[1:], target[1:], pred[:-1], target[:-1], cfg)


@dataclass
class OptimizerState:
    lr: float = 5e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState, lr: float | None = None) -> ModelParams:
    """One bias-corrected Adam update with decoupled weight decay, applied in place."""
    lr = state.lr if lr is None else lr
    for name, g in grads.items():
        if params[name].shape != np.shape(g):
            raise DimensionError(f"grad {name} has shape {np.shape(g)}, param {params[name].shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name].data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p *= 1.0 - lr * state.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def cosine_lr(step: int, cycle_len: int, base_lr: float, min_lr: float, t_mult: float = 2.0) -> float:
    """Cosine annealing with warm restarts; each cycle is ``t_mult`` times the previous, in whole steps."""
    if cycle_len < 1:
        raise ConfigError("cycle_len must be >= 1")
    if t_mult < 1:
        raise ConfigError("t_mult must be >= 1")
    t, length = step, cycle_len
    while t >= length:
        t -= length
        length = max(length, int(round(length * t_mult)))
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * t / length))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 0.01
    min_lr_ratio: float = 0.01
    t_mult: float = 2.0
    loss: HybridLossConfig = HybridLossConfig()


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    clip_fraction: float
    batches: int


@dataclass
class LocalStats:
    mean_loss: float
    clip_fraction: float
    batches: int
    windows: int
    sigma: float
    epochs: list[EpochStats]


def local_train(
    params: ModelParams,
    data: SequenceBatch,
    epochs: int,
    privacy: PrivacySpec | None,
    rng: np.random.Generator,
    model_config: TstConfig,
    train_config: TrainConfig = TrainConfig(),
    epsilon_round: float | None = None,
    hooks: dict[str, Callable] | None = None,
) -> tuple[ModelParams, LocalStats]:
    """Train a copy of ``params`` on ``data``.

    Each batch: forward, hybrid loss, backward, clip, noise, AdamW step.
    ``privacy=None`` trains without clipping or noise. ``hooks`` (test
    instrumentation) may hold ``privatize`` and ``step`` callables wrapping
    the respective stages.
    """
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")
    if len(data) == 0:
        raise DataError("empty training data")
    if train_config.batch_size > 32 or train_config.batch_size < 1:
        raise ConfigError("batch_size must lie in [1, 32]")
    if privacy is not None and epsilon_round is None:
        epsilon_round = allocate_budget(privacy)
    hooks = hooks or {}
    privatize = hooks.get("privatize", privatize_update)
    step_fn = hooks.get("step", adamw_step)

    params = params.clone()
    names = params.names()
    shapes = [params[n].shape for n in names]
    sizes = [params[n].data.size for n in names]
    state = OptimizerState(lr=train_config.lr, weight_decay=train_config.weight_decay)
    steps_per_epoch = math.ceil(len(data) / train_config.batch_size)
    min_lr = train_config.lr * train_config.min_lr_ratio

    epoch_stats, sigma, global_step = [], 0.0, 0
    for epoch in range(epochs):
        losses, clipped = [], 0
        for batch in iter_batches(data, train_config.batch_size, rng):
            params.requires_grad_(True)
            pred = forward(params, batch.inputs, model_config, training=True, rng=rng)
            loss = window_loss(pred, batch.targets, train_config.loss)
            loss.backward()
            g = params.flat_grad()
            if privacy is not None:
                g, diag = privatize(g, privacy, epsilon_round, rng)
                clipped += diag.was_clipped
                sigma = diag.sigma
            grads, offset = {}, 0
            for n, shape, size in zip(names, shapes, sizes):
                grads[n] = g[offset : offset + size].reshape(shape)
                offset += size
            params.requires_grad_(False)
            lr = cosine_lr(global_step, steps_per_epoch, train_config.lr, min_lr, train_config.t_mult)
            step_fn(params, grads, state, lr)
            losses.append(loss.item())
            global_step += 1
        epoch_stats.append(EpochStats(epoch, float(np.mean(losses)), clipped / len(losses), len(losses)))

    total = sum(e.batches for e in epoch_stats)
    stats = LocalStats(
        mean_loss=float(np.mean([e.mean_loss for e in epoch_stats])),
        clip_fraction=sum(e.clip_fraction * e.batches for e in epoch_stats) / total,
        batches=total,
        windows=len(data) * epochs,
        sigma=sigma,
        epochs=epoch_stats,
    )
    return params, stats
