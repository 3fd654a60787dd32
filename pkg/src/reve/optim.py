"""StableAdamW, the warmup-stable-decay schedule and width-based LR scaling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


@dataclass(frozen=True)
class OptimConfig:
    lr_peak: float = 2.4e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-9
    weight_decay: float = 0.01
    clip_threshold: float = 1.0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.clip_threshold <= 0:
            raise ValueError("clip_threshold must be > 0")


class NonFiniteGradient(FloatingPointError):
    pass


class StableAdamW(torch.optim.Optimizer):
    """AdamW whose per-tensor step size is divided by max(1, RMS(u) / d).

    u = m_hat / (sqrt(v_hat) + eps) is the unscaled Adam update of the tensor
    and d the clip threshold; decoupled weight decay uses the clipped rate.
    With the clip inactive the arithmetic matches ``torch.optim.AdamW``
    (single-tensor path) operation for operation.
    """

    def __init__(self, params, lr=2.4e-4, betas=(0.9, 0.95), eps=1e-9, weight_decay=0.01, clip_threshold=1.0):
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay, clip_threshold=clip_threshold)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            lr, eps, wd, clip = group["lr"], group["eps"], group["weight_decay"], group["clip_threshold"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                grad = p.grad
                if not torch.isfinite(grad).all():
                    raise NonFiniteGradient(f"non-finite gradient in tensor of shape {tuple(p.shape)}")
                state = self.state[p]
                if not state:
                    state["step"] = torch.tensor(0.0)
                    state["exp_avg"] = torch.zeros_like(p, memory_format=torch.preserve_format)
                    state["exp_avg_sq"] = torch.zeros_like(p, memory_format=torch.preserve_format)
                exp_avg, exp_avg_sq = state["exp_avg"], state["exp_avg_sq"]
                state["step"] += 1
                step = state["step"].item()

                exp_avg.lerp_(grad, 1 - beta1)
                exp_avg_sq.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)
                bias_correction1 = 1 - beta1**step
                bias_correction2 = 1 - beta2**step
                denom = (exp_avg_sq.sqrt() / bias_correction2**0.5).add_(eps)

                rms = torch.sqrt(torch.mean((exp_avg / bias_correction1 / denom) ** 2)).item()
                lr_eff = lr / max(1.0, rms / clip)
                state["last_rms"] = rms
                state["last_lr"] = lr_eff

                if wd != 0:
                    p.mul_(1 - lr_eff * wd)
                p.addcdiv_(exp_avg, denom, value=-(lr_eff / bias_correction1))
        return loss


def param_groups(model: nn.Module, weight_decay: float, frozen: tuple[str, ...] = ()) -> list[dict]:
    """Split trainable params: matrices decay; norm gains, biases, tokens do not."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad or name.startswith(frozen):
            continue
        (decay if p.ndim >= 2 else no_decay).append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


def build_optimizer(model: nn.Module, cfg: OptimConfig, lr: float | None = None) -> StableAdamW:
    return StableAdamW(
        param_groups(model, cfg.weight_decay),
        lr=cfg.lr_peak if lr is None else lr,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.eps,
        clip_threshold=cfg.clip_threshold,
    )


@dataclass(frozen=True)
class ScheduleConfig:
    steps_per_epoch: int = 1000
    n_epochs: int = 1
    warmup_frac: float = 0.10  # of the first epoch
    stable_frac: float = 0.80
    floor_frac: float = 0.01
    cyclic: bool = False

    def __post_init__(self):
        for name in ("warmup_frac", "stable_frac", "floor_frac"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must be in (0, 1]")
        if self.steps_per_epoch < 1 or self.n_epochs < 1:
            raise ValueError("steps_per_epoch and n_epochs must be >= 1")
        if self.warmup_frac + self.stable_frac > 1:
            raise ValueError("warmup_frac + stable_frac must not exceed 1")
        if (self.steps_per_epoch if self.cyclic else self.total_steps) < 2:
            raise ValueError("a schedule needs at least 2 steps (one warmup, one decay)")

    @property
    def total_steps(self) -> int:
        return self.steps_per_epoch * self.n_epochs

    def phases(self) -> tuple[int, int, int]:
        """(warmup, stable, decay) lengths of the first trapezoid."""
        horizon = self.steps_per_epoch if self.cyclic else self.total_steps
        warm = min(max(1, round(self.warmup_frac * self.steps_per_epoch)), horizon - 1)
        stable = round(self.stable_frac * horizon)
        decay = max(1, horizon - warm - stable)
        stable = horizon - warm - decay
        return warm, stable, decay


def wsd_lr(step: int, sched: ScheduleConfig, peak: float) -> float:
    """Piecewise-linear warmup / stable / decay learning rate at ``step``.

    Valid for 0 <= step <= total_steps; step 0 gives 0 and the final step
    gives ``floor_frac * peak``. In cyclic mode the warmup happens once and
    every later epoch restarts at peak for a stable stretch, then decays over
    the same number of steps as the first decay.
    """
    total = sched.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warm, stable, decay = sched.phases()
    floor = sched.floor_frac
    if step <= warm:
        return peak * (step / warm)  # exact peak at step == warm
    if sched.cyclic:
        epoch_len = sched.steps_per_epoch
        epoch = min((step - 1) // epoch_len, sched.n_epochs - 1)
        r = step - epoch * epoch_len
        decay_start = warm + stable if epoch == 0 else epoch_len - decay
    else:
        r, decay_start = step, warm + stable
    if r <= decay_start:
        return peak
    left = (decay - (r - decay_start)) / decay  # 1 -> 0 over the decay
    return peak * (floor + (1 - floor) * left)


def scale_lr(dim: int, base_dim: int = 512, base_lr: float = 2.4e-4, alpha: float = -0.90) -> float:
    """Power-law learning rate for model width: base_lr * (dim/base_dim)^alpha."""
    if dim <= 0 or base_dim <= 0:
        raise ValueError("dims must be positive")
    return base_lr * (dim / base_dim) ** alpha


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr
