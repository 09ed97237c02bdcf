"""Training engine: one-step recipe and deterministic simulated data parallelism.

A step runs forward (optionally discarding per-layer activations and
recomputing them during backward), scales the loss, checks the dynamic
loss scaler, clips the global gradient norm and applies one Adam update at
the scheduled learning rate.  ``data_parallel_step`` splits the batch into
shards, normalizes every shard loss by the full-batch denominators, and
reduces shard gradients by summation in fixed shard-index order, which
makes the result equal to the single-replica full-batch step up to
floating-point rounding.

Metrics are emitted one line-delimited JSON record per step; engine
checkpoints restore bit-identical continuation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable, Optional, TextIO

import numpy as np

from . import objectives
from . import tensor as T
from .data import PackedSequenceBatch
from .model import ModelConfig, ModelParams, config_from_text, config_to_text, forward, parameter_inventory
from .optim import (
    AdamHyperparams,
    LossScaler,
    OptimizerState,
    TrainSchedule,
    adam_step,
    clip_global_norm,
    loss_scaler_step,
    lr_at,
)
from .tensor import DropoutRng, Tape, Tensor

ENGINE_CHECKPOINT_VERSION = 1


@dataclass
class EngineConfig:
    schedule: TrainSchedule
    adam: AdamHyperparams = AdamHyperparams()
    max_grad_norm: float = 1.0
    use_loss_scaler: bool = True
    initial_loss_scale: float = 2.0**16
    scaler_growth_interval: int = 2000
    recompute_activations: bool = False
    seed: int = 0


@dataclass
class StepMetrics:
    step: int
    loss: float
    lr: float
    grad_norm: float
    loss_scale: float
    skipped: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def write_metrics(stream: TextIO, metrics: StepMetrics) -> None:
    stream.write(metrics.to_json() + "\n")
    stream.flush()


def _combine(components: tuple[Tensor, ...]) -> Tensor:
    total = components[0]
    for part in components[1:]:
        total = T.add(total, part)
    return total


class TrainEngine:
    """Owns the parameters, optimizer state and step counter for one run.

    ``loss_fn(engine, batch, rng, normalizers)`` overrides the family
    objective (fine-tuning heads); ``weights_fn(batch)`` must supply the
    matching loss-component weights when sharded steps are used.
    """

    def __init__(
        self,
        params: ModelParams,
        model_cfg: ModelConfig,
        engine_cfg: EngineConfig,
        loss_fn=None,
        weights_fn=None,
    ):
        self.params = params
        self.model_cfg = model_cfg
        self.cfg = engine_cfg
        self.loss_fn = loss_fn
        self.weights_fn = weights_fn
        self.optimizer = OptimizerState(params, engine_cfg.adam)
        self.scaler = (
            LossScaler(scale=engine_cfg.initial_loss_scale, growth_interval=engine_cfg.scaler_growth_interval)
            if engine_cfg.use_loss_scaler
            else None
        )
        self.step = 0

    # -- objective ---------------------------------------------------------

    def _loss_weights(self, batch: PackedSequenceBatch) -> tuple[float, ...]:
        if self.weights_fn is not None:
            return self.weights_fn(batch)
        if self.model_cfg.family == "encoder-only":
            return (float(batch.loss_mask.sum()), float(batch.batch_size))
        if self.model_cfg.family == "decoder-only":
            return (float(batch.loss_mask[..., 1:].sum()),)
        return (float(batch.loss_mask.sum()),)

    def _forward_loss(
        self,
        batch: PackedSequenceBatch,
        rng: Optional[DropoutRng],
        normalizers: Optional[tuple[float, ...]] = None,
    ) -> Tensor:
        """Objective for one (sub-)batch.

        ``normalizers`` replaces the per-component denominators with
        full-batch weights so shard losses sum to the full-batch loss.
        """
        cfg = self.model_cfg
        recompute = self.cfg.recompute_activations
        norms = normalizers or (None, None)
        if self.loss_fn is not None:
            return self.loss_fn(self, batch, rng, normalizers)
        if cfg.family == "decoder-only":
            out = forward(self.params, cfg, batch.ids, mode="train", rng=rng, recompute=recompute)
            return objectives.lm_loss(out.logits, batch, norms[0])
        if cfg.family == "encoder-only":
            out = forward(
                self.params, cfg, batch.ids, mode="train", rng=rng, recompute=recompute,
                type_ids=batch.type_ids,
            )
            return _combine(
                (
                    objectives.mlm_loss(out.logits, batch, norms[0]),
                    objectives.sop_loss(out.sop_logits, batch, norms[1]),
                )
            )
        out = forward(
            self.params, cfg, batch.ids, mode="train", rng=rng, recompute=recompute,
            source_ids=batch.source_ids, source_attention_mask=batch.source_mask,
        )
        return objectives.seq2seq_loss(out.logits, batch, norms[0])

    # -- gradient plumbing ---------------------------------------------------

    def _collect_grads(self) -> dict[str, np.ndarray]:
        grads = {}
        for name, t in self.params.items():
            grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        return grads

    def _apply_update(self, grads: dict[str, np.ndarray], loss_value: float) -> StepMetrics:
        skipped = False
        norm = float("nan")
        if self.scaler is not None:
            ok, grads = loss_scaler_step(self.scaler, grads)
            skipped = not ok
        if not skipped:
            grads, norm = clip_global_norm(grads, self.cfg.max_grad_norm)
            lr = lr_at(self.cfg.schedule, self.step + 1)
            adam_step(self.params, grads, self.optimizer, lr)
        else:
            lr = lr_at(self.cfg.schedule, self.step + 1)
        metrics = StepMetrics(
            step=self.step,
            loss=loss_value,
            lr=lr,
            grad_norm=norm,
            loss_scale=self.scaler.scale if self.scaler else 1.0,
            skipped=skipped,
        )
        self.step += 1
        return metrics

    # -- public steps --------------------------------------------------------

    def _scaled_gradients(self, batch: PackedSequenceBatch, n_shards: int) -> tuple[dict[str, np.ndarray], float]:
        """Forward/backward only: (loss-scale times gradients, unscaled loss).

        With ``n_shards > 1`` the batch is split, every shard loss is
        normalized by the full-batch denominators, and shard gradients are
        summed in fixed shard-index order.
        """
        scale = self.scaler.scale if self.scaler else 1.0
        if n_shards == 1:
            self.params.zero_grads()
            rng = DropoutRng(self.cfg.seed, self.step, batch.example_ids)
            with Tape() as tape:
                loss = self._forward_loss(batch, rng)
                scaled = T.scale(loss, scale) if self.scaler else loss
            tape.backward(scaled)
            return self._collect_grads(), float(loss.data)
        global_weights = self._loss_weights(batch)
        shard_grads: list[dict[str, np.ndarray]] = []
        loss_total = 0.0
        for index in range(n_shards):
            shard = batch.shard(index, n_shards)
            self.params.zero_grads()
            rng = DropoutRng(self.cfg.seed, self.step, shard.example_ids)
            with Tape() as tape:
                loss = self._forward_loss(shard, rng, normalizers=global_weights)
                scaled = T.scale(loss, scale) if self.scaler else loss
            tape.backward(scaled)
            shard_grads.append(self._collect_grads())
            loss_total += float(loss.data)
        combined = {}
        for name in self.params.names():
            total = shard_grads[0][name]
            for index in range(1, n_shards):
                total = total + shard_grads[index][name]
            combined[name] = total
        self.params.zero_grads()
        return combined, loss_total

    def compute_gradients(self, batch: PackedSequenceBatch, n_shards: int = 1) -> tuple[dict[str, np.ndarray], float]:
        """Unscaled full-batch gradients and loss, without touching any state."""
        grads, loss = self._scaled_gradients(batch, n_shards)
        scale = self.scaler.scale if self.scaler else 1.0
        return {name: g / scale for name, g in grads.items()}, loss

    def train_step(self, batch: PackedSequenceBatch) -> StepMetrics:
        grads, loss = self._scaled_gradients(batch, n_shards=1)
        return self._apply_update(grads, loss)

    def data_parallel_step(self, batch: PackedSequenceBatch, n_shards: int) -> StepMetrics:
        """Shard the batch, reduce gradients in fixed shard order, update once."""
        grads, loss = self._scaled_gradients(batch, n_shards)
        return self._apply_update(grads, loss)

    # -- persistence -----------------------------------------------------------

    def state_meta(self) -> dict:
        return {
            "version": ENGINE_CHECKPOINT_VERSION,
            "model_config": config_to_text(self.model_cfg),
            "engine": {
                "schedule": asdict(self.cfg.schedule),
                "adam": asdict(self.cfg.adam),
                "max_grad_norm": self.cfg.max_grad_norm,
                "use_loss_scaler": self.cfg.use_loss_scaler,
                "initial_loss_scale": self.cfg.initial_loss_scale,
                "scaler_growth_interval": self.cfg.scaler_growth_interval,
                "recompute_activations": self.cfg.recompute_activations,
                "seed": self.cfg.seed,
            },
            "step": self.step,
            "optimizer_step": self.optimizer.step,
            "scaler": None
            if self.scaler is None
            else {"scale": self.scaler.scale, "consecutive_good_steps": self.scaler.consecutive_good_steps},
        }


def save_engine_checkpoint(path: str, engine: TrainEngine) -> None:
    arrays = {f"param:{n}": t.data for n, t in engine.params.items()}
    arrays.update({f"adam_m:{n}": m for n, m in engine.optimizer.m.items()})
    arrays.update({f"adam_v:{n}": v for n, v in engine.optimizer.v.items()})
    arrays["meta"] = np.frombuffer(json.dumps(engine.state_meta()).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_engine_checkpoint(path: str) -> TrainEngine:
    with np.load(path) as archive:
        meta = json.loads(archive["meta"].tobytes().decode("utf-8"))
        if meta.get("version") != ENGINE_CHECKPOINT_VERSION:
            raise ValueError(f"unsupported engine checkpoint version {meta.get('version')!r}")
        model_cfg = config_from_text(meta["model_config"], source=path)
        eng = meta["engine"]
        engine_cfg = EngineConfig(
            schedule=TrainSchedule(**eng["schedule"]),
            adam=AdamHyperparams(**eng["adam"]),
            max_grad_norm=eng["max_grad_norm"],
            use_loss_scaler=eng["use_loss_scaler"],
            initial_loss_scale=eng["initial_loss_scale"],
            scaler_growth_interval=eng["scaler_growth_interval"],
            recompute_activations=eng["recompute_activations"],
            seed=eng["seed"],
        )
        tensors = {}
        for name, shape, _ in parameter_inventory(model_cfg):
            tensors[name] = Tensor(archive[f"param:{name}"].copy(), requires_grad=True, name=name)
        params = ModelParams(tensors)
        engine = TrainEngine(params, model_cfg, engine_cfg)
        engine.step = int(meta["step"])
        engine.optimizer.step = int(meta["optimizer_step"])
        for name in params.names():
            engine.optimizer.m[name] = archive[f"adam_m:{name}"].copy()
            engine.optimizer.v[name] = archive[f"adam_v:{name}"].copy()
        if engine.scaler is not None and meta["scaler"] is not None:
            engine.scaler.scale = float(meta["scaler"]["scale"])
            engine.scaler.consecutive_good_steps = int(meta["scaler"]["consecutive_good_steps"])
    return engine


def train_loop(
    engine: TrainEngine,
    batch_fn: Callable[[int], PackedSequenceBatch],
    n_steps: int,
    metrics_stream: Optional[TextIO] = None,
    n_shards: int = 1,
) -> list[StepMetrics]:
    """Run ``n_steps`` training steps; batch ``k`` comes from ``batch_fn(k)``."""
    history = []
    for _ in range(n_steps):
        batch = batch_fn(engine.step)
        metrics = (
            engine.train_step(batch) if n_shards == 1 else engine.data_parallel_step(batch, n_shards)
        )
        if metrics_stream is not None:
            write_metrics(metrics_stream, metrics)
        history.append(metrics)
    return history
