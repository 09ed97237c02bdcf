"""Optimization recipe: warmup schedules, global clipping, Adam, loss scaling.

Weight decay is decoupled (applied to the parameter before the Adam delta,
never mixed into the gradient).  Matrices decay; vectors (biases and norm
gains) and the embedding tables do not, following the model lineage these
recipes come from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import ModelParams

DECAY_SHAPES = ("cosine", "linear")


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class TrainSchedule:
    """Linear warmup from zero, then cosine or linear decay to ``min_lr``."""

    peak_lr: float
    min_lr: float
    warmup_steps: int
    total_steps: int
    decay_shape: str = "cosine"

    def __post_init__(self):
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ScheduleError(
                f"warmup_steps must lie in [0, total_steps], got {self.warmup_steps} of {self.total_steps}"
            )
        if self.min_lr > self.peak_lr:
            raise ScheduleError(f"min_lr {self.min_lr} exceeds peak_lr {self.peak_lr}")
        if self.decay_shape not in DECAY_SHAPES:
            raise ScheduleError(f"decay_shape must be one of {DECAY_SHAPES}, got {self.decay_shape!r}")


# The published pretraining schedules.
GPT_PRETRAIN_SCHEDULE = TrainSchedule(peak_lr=1.5e-4, min_lr=1e-5, warmup_steps=3_000, total_steps=300_000, decay_shape="cosine")
BERT_PRETRAIN_SCHEDULE = TrainSchedule(peak_lr=1.0e-4, min_lr=0.0, warmup_steps=10_000, total_steps=500_000, decay_shape="linear")


def lr_at(schedule: TrainSchedule, step: int) -> float:
    """Learning rate after ``step`` iterations (ramp 0 -> peak over warmup,
    decay to ``min_lr`` at ``total_steps``, clamped afterwards)."""
    if step < 0:
        raise ScheduleError(f"step must be non-negative, got {step}")
    if step < schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    if step >= schedule.total_steps:
        return schedule.min_lr
    progress = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    if schedule.decay_shape == "cosine":
        return schedule.min_lr + (schedule.peak_lr - schedule.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))
    return schedule.peak_lr + (schedule.min_lr - schedule.peak_lr) * progress


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> tuple[dict[str, np.ndarray], float]:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the (possibly rescaled) gradients and the observed pre-clip
    norm.  A non-finite input is signalled by a non-finite returned norm
    with the gradients untouched, not by an exception.
    """
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = math.sqrt(total)
    if not math.isfinite(norm):
        return grads, norm
    if norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}, norm


@dataclass(frozen=True)
class AdamHyperparams:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


_EMBEDDING_NAMES = frozenset({"tok_emb", "pos_emb", "type_emb"})


def wants_weight_decay(name: str, shape: tuple[int, ...]) -> bool:
    return len(shape) >= 2 and name not in _EMBEDDING_NAMES


class OptimizerState:
    """Per-parameter Adam moments plus the shared step counter."""

    def __init__(self, params: ModelParams, hyper: AdamHyperparams = AdamHyperparams()):
        self.hyper = hyper
        self.step = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.decay = {name: wants_weight_decay(name, t.shape) for name, t in params.items()}


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update with decoupled weight decay."""
    h = state.hyper
    state.step += 1
    c1 = 1.0 - h.beta1 ** state.step
    c2 = 1.0 - h.beta2 ** state.step
    for name, tensor in params.items():
        g = grads[name]
        if g.shape != tensor.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {tensor.shape}")
        if state.decay[name] and h.weight_decay != 0.0 and lr != 0.0:
            tensor.data *= 1.0 - lr * h.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= h.beta1
        m += (1.0 - h.beta1) * g
        v *= h.beta2
        v += (1.0 - h.beta2) * np.square(g)
        if lr != 0.0:
            tensor.data -= lr * (m / c1) / (np.sqrt(v / c2) + h.eps)


@dataclass
class LossScaler:
    """Dynamic loss-scale state machine.

    Any non-finite gradient skips the update, multiplies the scale by
    ``backoff_factor`` and resets the good-step counter; after
    ``growth_interval`` consecutive good steps the scale grows by
    ``growth_factor``.
    """

    scale: float = 2.0**16
    growth_interval: int = 2000
    growth_factor: float = 2.0
    backoff_factor: float = 0.5
    consecutive_good_steps: int = 0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"loss scale must be positive, got {self.scale}")


def loss_scaler_step(
    scaler: LossScaler, grads: dict[str, np.ndarray]
) -> tuple[bool, Optional[dict[str, np.ndarray]]]:
    """Inspect scaled gradients; unscale them or request a skipped step.

    Returns ``(True, unscaled_grads)`` on a good step and ``(False, None)``
    after an overflow (a skip is a normal outcome, surfaced in metrics).
    """
    overflow = any(not np.all(np.isfinite(g)) for g in grads.values())
    if overflow:
        scaler.scale *= scaler.backoff_factor
        scaler.consecutive_good_steps = 0
        return False, None
    unscaled = {name: g / scaler.scale for name, g in grads.items()}
    scaler.consecutive_good_steps += 1
    if scaler.consecutive_good_steps >= scaler.growth_interval:
        scaler.scale *= scaler.growth_factor
        scaler.consecutive_good_steps = 0
    return True, unscaled
