"""Adam training loop with gradient accumulation and per-epoch checkpoints."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..mlm_dataset import MlmExample
from .checkpoint import AdamState, Checkpoint, load_checkpoint, save_checkpoint
from .model import NumericFailure, collate, loss_and_grads
from .params import ModelParams

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    grad_accum_steps: int = 4
    epochs: int = 10
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.grad_accum_steps < 1:
            raise ValueError("batch_size and grad_accum_steps must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")

    def lr_at(self, step: int) -> float:
        """Learning rate for 1-based optimizer step: linear warmup, then constant."""
        if self.warmup_steps and step <= self.warmup_steps:
            return self.lr * step / self.warmup_steps
        return self.lr


@dataclass
class TraceRow:
    step: int
    epoch: int
    loss: float
    masked_acc: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: list[TraceRow] = field(default_factory=list)

    @property
    def params(self) -> ModelParams:
        return self.checkpoint.params


class TrainingDiverged(NumericFailure):
    def __init__(self, message: str, last_checkpoint: Path | None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


def adam_update(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig) -> None:
    state.step += 1
    t = state.step
    lr = cfg.lr_at(t)
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.dtype, copy=False)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(n)


def write_trace(rows: Sequence[TraceRow], path: str | Path, append: bool = False) -> None:
    path = Path(path)
    new = not append or not path.exists()
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        if new:
            w.writerow(["step", "epoch", "loss", "masked_acc"])
        for r in rows:
            w.writerow([r.step, r.epoch, f"{r.loss:.8g}", f"{r.masked_acc:.6f}"])


def train(
    start: ModelParams | Checkpoint,
    examples: Sequence[MlmExample],
    config: TrainConfig,
    *,
    checkpoint_path: str | Path | None = None,
    on_step: Callable[[TraceRow], None] | None = None,
) -> TrainResult:
    """Train until ``config.epochs`` epochs are complete.

    ``start`` is either fresh/loaded parameters (new optimizer state, epoch 0)
    or a full :class:`Checkpoint`, whose epoch counter and Adam moments are
    resumed. An optimizer step is taken every ``grad_accum_steps``
    micro-batches, and at the end of an epoch for any remainder; its gradient
    is the sum of per-token gradients over the window divided by the number
    of masked tokens in the window.
    """
    if not examples:
        raise ValueError("cannot train on an empty dataset")
    if isinstance(start, Checkpoint):
        params = start.params.copy()
        epoch0, global_step = start.epoch, start.global_step
        if start.optimizer is not None:
            state = AdamState(start.optimizer.step,
                              {k: v.copy() for k, v in start.optimizer.m.items()},
                              {k: v.copy() for k, v in start.optimizer.v.items()})
        else:
            state = AdamState.zeros_like(params)
    else:
        params = start.copy()
        epoch0, global_step = 0, 0
        state = AdamState.zeros_like(params)

    cfg = params.config
    trace: list[TraceRow] = []
    checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
    last_good = checkpoint_path if checkpoint_path and checkpoint_path.exists() else None
    n = len(examples)
    bs = config.batch_size

    for epoch in range(epoch0, config.epochs):
        order = epoch_order(config.seed, epoch, n)
        micro = [order[i:i + bs] for i in range(0, n, bs)]
        drop_rng = (np.random.default_rng(np.random.SeedSequence([config.seed, epoch, 1]))
                    if cfg.dropout_prob > 0 else None)
        acc = {k: np.zeros_like(v) for k, v in params.items()}
        win_loss = 0.0
        win_count = win_correct = win_batches = 0
        for mi, idx in enumerate(micro):
            batch = collate([examples[int(j)] for j in idx])
            try:
                stats, grads = loss_and_grads(params, batch, dropout_rng=drop_rng, reduction="sum")
            except NumericFailure as e:
                raise TrainingDiverged(f"epoch {epoch}, step {global_step + 1}: {e}", last_good) from e
            if stats.masked_count:
                for k, g in grads.items():
                    acc[k] += g
                win_loss += stats.loss
                win_count += stats.masked_count
                win_correct += stats.correct
            win_batches += 1
            if win_batches < config.grad_accum_steps and mi != len(micro) - 1:
                continue
            if win_count:
                mean_loss = win_loss / win_count
                if not math.isfinite(mean_loss):
                    raise TrainingDiverged(f"epoch {epoch}, step {global_step + 1}: non-finite loss", last_good)
                inv = 1.0 / win_count
                for k in acc:
                    acc[k] *= inv
                adam_update(params, acc, state, config)
                global_step += 1
                row = TraceRow(global_step, epoch, mean_loss, win_correct / win_count)
                trace.append(row)
                if on_step:
                    on_step(row)
            for k in acc:
                acc[k].fill(0)
            win_loss = 0.0
            win_count = win_correct = win_batches = 0
        if checkpoint_path is not None:
            save_checkpoint(Checkpoint(params, global_step, epoch + 1, state), checkpoint_path)
            last_good = checkpoint_path
        log.info("epoch %d done at step %d", epoch, global_step)

    return TrainResult(Checkpoint(params, global_step, max(epoch0, config.epochs), state), trace)


def resume(path: str | Path, examples: Sequence[MlmExample], config: TrainConfig, **kw) -> TrainResult:
    return train(load_checkpoint(path), examples, config, **kw)
