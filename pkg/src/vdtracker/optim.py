"""AdamW with a linear-warmup + cosine-decay learning-rate schedule, plus the
episode-level training step.

A training batch is a list of dialog episodes; the loss is the mean of the
per-episode losses (each itself a mean over that episode's turns). Episodes
are processed sequentially in a fixed order, so gradient accumulation is
deterministic. Batch composition is a pure function of (seed, step), which
makes resumed runs continue bit-exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .data import derive_seed
from .model import ModelConfig, no_decay, run_dialog
from .tensor import Tape, backward, scale


class NanGradientError(RuntimeError):
    """A non-finite gradient was produced; the optimizer refuses to step."""


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 1e-4
    warmup_steps: int = 4000
    total_steps: int = 200_000

    def __post_init__(self):
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError("need 0 < warmup_steps < total_steps")


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Linear 0 -> base_lr over the warmup, then cosine decay to 0 at
    total_steps. Both branches give exactly base_lr at the boundary; steps
    past the end clamp to 0."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    if step > cfg.total_steps:
        return 0.0
    if step <= cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimState:
    """Per-parameter first/second moments plus the step counter."""

    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "OptimState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
            t=0,
        )


def adamw_step(params: dict, state: OptimState, lr: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.01, skip_decay=no_decay):
    """One decoupled-weight-decay Adam update over every parameter.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + lambda * theta),
    with decay skipped for parameters matched by ``skip_decay``. Aborts with
    a named diagnostic on any non-finite gradient.
    """
    for name in params:
        p = params[name]
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NanGradientError(f"non-finite gradient in parameter {name!r}")
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name in params:
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay and not skip_decay(name):
            update = update + weight_decay * p.data
        p.data -= (lr * update).astype(p.data.dtype)


def clip_global_norm(params: dict, max_norm: float) -> float:
    """Optional global-norm gradient clipping; returns the pre-clip norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 50          # episodes per step
    steps: int = 0                # 0 means run to schedule.total_steps
    seed: int = 0
    grad_clip: float = 0.0        # 0 disables clipping
    log_every: int = 50
    ckpt_every: int = 0           # 0 means final checkpoint only


def sample_batch(n_episodes: int, batch_size: int, seed: int, step: int):
    """Batch composition for a given step; stateless so resume replays it."""
    rng = np.random.default_rng(derive_seed(seed, "batch", step))
    size = min(batch_size, n_episodes)
    return [int(i) for i in rng.choice(n_episodes, size=size, replace=False)]


def train_step(batch, params: dict, optim: OptimState, schedule: ScheduleConfig,
               cfg: ModelConfig, embedder, grad_clip: float = 0.0,
               drop_seed: int | None = None) -> float:
    """One optimizer step over a batch of episodes; returns the mean loss."""
    if not batch:
        raise ValueError("empty batch")
    for p in params.values():
        p.zero_grad()
    weight = 1.0 / len(batch)
    losses = []
    for episode in batch:
        drop_rng = (np.random.default_rng(derive_seed(drop_seed, "drop", optim.t,
                                                      episode.episode_id))
                    if drop_seed is not None and cfg.dropout > 0 else None)
        with Tape():
            _, loss = run_dialog(episode, params, cfg, embedder,
                                 compute_loss=True, drop_rng=drop_rng)
            backward(scale(loss, weight))
        losses.append(float(loss.data))
    if grad_clip > 0:
        clip_global_norm(params, grad_clip)
    lr = lr_at(optim.t + 1, schedule)
    adamw_step(params, optim, lr)
    return float(np.mean(losses))


def train_loop(episodes, params: dict, optim: OptimState, cfg: ModelConfig,
               schedule: ScheduleConfig, train_cfg: TrainConfig, embedder,
               metrics_path=None, on_checkpoint=None):
    """Run training steps from the optimizer's current step counter up to the
    requested budget, logging (step, lr, loss) rows. ``on_checkpoint`` is
    called as f(step) at every checkpoint interval and at the end."""
    total = train_cfg.steps or schedule.total_steps
    rows = []
    writer = None
    fh = None
    if metrics_path is not None:
        exists = False
        try:
            exists = metrics_path.exists() and metrics_path.stat().st_size > 0
        except AttributeError:
            pass
        fh = open(metrics_path, "a", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        if not exists:
            writer.writerow(["step", "lr", "loss"])
    try:
        while optim.t < total:
            step = optim.t  # sampling key for the step about to run
            idx = sample_batch(len(episodes), train_cfg.batch_size,
                               train_cfg.seed, step)
            batch = [episodes[i] for i in idx]
            loss = train_step(batch, params, optim, schedule, cfg, embedder,
                              grad_clip=train_cfg.grad_clip,
                              drop_seed=train_cfg.seed)
            lr = lr_at(optim.t, schedule)
            rows.append((optim.t, lr, loss))
            if writer is not None:
                writer.writerow([optim.t, f"{lr:.10g}", f"{loss:.10g}"])
            if (train_cfg.ckpt_every and on_checkpoint is not None
                    and optim.t % train_cfg.ckpt_every == 0):
                on_checkpoint(optim.t)
    finally:
        if fh is not None:
            fh.close()
    if on_checkpoint is not None:
        on_checkpoint(optim.t)
    return rows
