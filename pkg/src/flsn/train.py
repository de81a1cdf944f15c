"""L1 training with Adam and a step learning-rate schedule."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .errors import ConfigError, ContractError, DimensionError, GeometryError, LoadError, NumericError
from .model import FLSN
from .synth import N_FRAMES, SimSample, normalize
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_HEADER = "epoch,step,lr,loss\n"


@dataclass
class TrainConfig:
    batch_size: int = 10
    lr0: float = 1e-4
    lr_decay_factor: float = 1 / 12
    lr_decay_every: int = 20
    epochs: int = 70
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    crop_size: int = 64
    checkpoint_every: int = 10
    max_steps: int = 0  # 0 = no cap

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigError(f"lr_decay_factor must lie in (0, 1], got {self.lr_decay_factor}")
        if self.lr_decay_every < 1 or self.epochs < 0 or self.crop_size < 1 or self.checkpoint_every < 1:
            raise ConfigError("lr_decay_every, crop_size and checkpoint_every must be >= 1 and epochs >= 0")


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params) -> "OptimState":
        return cls(
            m={n: np.zeros_like(t.data) for n, t in params.items()},
            v={n: np.zeros_like(t.data) for n, t in params.items()},
        )


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over every element."""
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss: prediction {pred.shape} vs target {target.shape}")
    return T.mean(T.abs(T.sub(pred, target)))


def adam_step(params: dict[str, Tensor], state: OptimState, lr: float, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place."""
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {name!r} has no gradient")
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, p in params.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def pick_frame(sample: SimSample, rng: np.random.Generator, return_index: bool = False):
    """Uniformly chosen SI frame, normalized to [0, 1]."""
    if len(sample.frames) != N_FRAMES:
        raise ContractError(f"sample has {len(sample.frames)} frames, expected {N_FRAMES}")
    i = int(rng.integers(N_FRAMES))
    frame = normalize(sample.frames[i].astype(np.float32))
    return (frame, i) if return_index else frame


def make_batch(samples: list[SimSample], crop: int, rng: np.random.Generator):
    lrs, hrs = [], []
    for s in samples:
        frame = pick_frame(s, rng)
        h, w = frame.shape[2:]
        if crop > h or crop > w:
            raise GeometryError(f"crop_size {crop} exceeds frame size {h}x{w}")
        y = int(rng.integers(h - crop + 1))
        x = int(rng.integers(w - crop + 1))
        lrs.append(frame[:, :, y : y + crop, x : x + crop])
        hrs.append(normalize(s.hr[:, :, 2 * y : 2 * y + 2 * crop, 2 * x : 2 * x + 2 * crop].astype(np.float32)))
    return np.concatenate(lrs), np.concatenate(hrs)


@dataclass
class FitResult:
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    state: OptimState | None = None
    epochs_done: int = 0


def fit(
    model: FLSN,
    samples: list[SimSample],
    cfg: TrainConfig,
    out_dir: str | os.PathLike | None = None,
    state: OptimState | None = None,
    start_epoch: int = 0,
) -> FitResult:
    """Train ``model`` in place.

    Batch composition, frame choice and crops depend only on (seed, epoch),
    so resuming from a checkpoint written at an epoch boundary replays the
    uninterrupted run exactly. With ``out_dir`` a CSV log (appended on
    resume) and FLC1 checkpoints are written there.
    """
    if not samples:
        raise ContractError("fit needs at least one training sample")
    if cfg.crop_size % model.config.divisor:
        raise GeometryError(
            f"crop_size {cfg.crop_size} must be divisible by 2^B = {model.config.divisor} for B = {model.config.branches}"
        )
    state = state or OptimState.zeros(model.params)
    result = FitResult(state=state, epochs_done=start_epoch)
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.csv"
        fresh = start_epoch == 0 or not log_path.exists()
        try:
            log_file = open(log_path, "w" if fresh else "a", encoding="utf-8", newline="\n")
        except OSError as e:
            raise LoadError(f"cannot open training log {log_path}: {e}") from e
        if fresh:
            log_file.write(LOG_HEADER)
    try:
        for epoch in range(start_epoch, cfg.epochs):
            if cfg.max_steps and state.step >= cfg.max_steps:
                break
            rng = np.random.default_rng([cfg.seed, epoch])
            order = rng.permutation(len(samples))
            lr = lr_at(epoch, cfg)
            losses = []
            complete = True
            for start in range(0, len(order), cfg.batch_size):
                if cfg.max_steps and state.step >= cfg.max_steps:
                    complete = False
                    break
                lr_batch, hr_batch = make_batch([samples[i] for i in order[start : start + cfg.batch_size]], cfg.crop_size, rng)
                model.zero_grad()
                loss = l1_loss(model(Tensor(lr_batch)), Tensor(hr_batch))
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(f"non-finite loss {value} at epoch {epoch}, step {state.step + 1}")
                T.backward(loss)
                adam_step(model.params, state, lr, cfg)
                losses.append(value)
                result.step_losses.append(value)
                if log_file:
                    log_file.write(f"{epoch},{state.step},{lr!r},{value!r}\n")
            if complete:
                result.epochs_done = epoch + 1
            mean_loss = float(np.mean(losses)) if losses else float("nan")
            result.epoch_losses.append(mean_loss)
            log.info("epoch %d  lr %.3g  loss %.6f", epoch, lr, mean_loss)
            if out is not None and complete and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"ckpt_epoch_{epoch + 1:04d}.flc", model, state, epoch + 1)
        if out is not None:
            save_checkpoint(out / "checkpoint.flc", model, state, result.epochs_done)
    finally:
        if log_file:
            log_file.close()
    return result
