"""Learning-rate schedules: warmup + cosine/constant, and batch-size adaptive LR."""
from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class ALRConfig:
    base_lr: float
    ref_batch_tokens: int

    def __post_init__(self):
        if self.base_lr <= 0 or self.ref_batch_tokens <= 0:
            raise ValueError("ALRConfig needs base_lr > 0 and ref_batch_tokens > 0")


@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float
    final_lr: float
    warmup_steps: int
    total_steps: int
    shape: str = "cosine"

    def __post_init__(self):
        if self.shape not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule shape {self.shape!r}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if self.final_lr > self.peak_lr:
            raise ValueError("final_lr must not exceed peak_lr")


def batch_scale(batch_tokens: int, ref_batch_tokens: int) -> float:
    if batch_tokens < 0:
        raise ValueError("batch_tokens must be >= 0")
    return math.sqrt(batch_tokens / ref_batch_tokens)


def alr(cfg: ALRConfig, batch_tokens: int) -> float:
    """LR * sqrt(T / BS), where T counts the loss-bearing tokens of the batch."""
    return cfg.base_lr * batch_scale(batch_tokens, cfg.ref_batch_tokens)


def schedule_lr(cfg: ScheduleConfig, step: int) -> float:
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    if cfg.shape == "constant" or cfg.total_steps == cfg.warmup_steps:
        return cfg.peak_lr
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.final_lr + 0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + math.cos(math.pi * progress))


def effective_lr(sched: ScheduleConfig, alr_cfg: ALRConfig | None, step: int, batch_tokens: int) -> float:
    """Scheduled LR scaled by the adaptive-LR factor (when ``alr_cfg`` is given)."""
    lr = schedule_lr(sched, step)
    if alr_cfg is None:
        return lr
    return lr * batch_scale(batch_tokens, alr_cfg.ref_batch_tokens)


def lr_table(sched: ScheduleConfig) -> list[tuple[int, float]]:
    return [(s, schedule_lr(sched, s)) for s in range(sched.total_steps + 1)]
