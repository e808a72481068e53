"""
AdamW with a linear warm-up learning-rate schedule
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence

import numpy as np

from src.utils.errors import GradientError
from .tensor import Tensor


class LinearWarmupSchedule:
    """Linear ramp over the first warmup_ratio of total steps, then constant"""

    def __init__(self, base_lr: float, total_steps: int, warmup_ratio: float = 0.05):
        self.base_lr = base_lr
        self.total_steps = max(int(total_steps), 1)
        self.warmup_steps = int(round(warmup_ratio * self.total_steps))

    def __call__(self, step: int) -> float:
        """Rate for the update with zero-based index `step`"""
        if self.warmup_steps <= 0:
            return self.base_lr
        return self.base_lr * min(1.0, (step + 1) / self.warmup_steps)


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: Dict[int, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[int, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Sequence[Tensor], state: AdamWState, lr_schedule: Callable[[int], float],
               betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0) -> float:
    """One in-place AdamW update; returns the learning rate that was applied"""
    missing = [p.name or repr(p) for p in params if p.grad is None]
    if missing:
        raise GradientError(f"adamw_step: no gradient on {', '.join(missing)}")

    lr = lr_schedule(state.step)
    state.step += 1
    beta1, beta2 = betas
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step

    for i, p in enumerate(params):
        g = p.grad
        m = state.exp_avg.get(i)
        v = state.exp_avg_sq.get(i)
        m = g.copy() * (1.0 - beta1) if m is None else beta1 * m + (1.0 - beta1) * g
        v = (g * g) * (1.0 - beta2) if v is None else beta2 * v + (1.0 - beta2) * (g * g)
        state.exp_avg[i] = m
        state.exp_avg_sq[i] = v

        if weight_decay:
            p.data -= lr * weight_decay * p.data
        denom = np.sqrt(v / correction2) + eps
        p.data -= lr * (m / correction1) / denom

    return lr


class AdamW:
    """Stateful wrapper: owns the parameter list, state and schedule"""

    def __init__(self, params: List[Tensor], lr_schedule: Callable[[int], float],
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr_schedule = lr_schedule
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamWState()

    @property
    def step_count(self) -> int:
        return self.state.step

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        return adamw_step(self.params, self.state, self.lr_schedule,
                          betas=self.betas, eps=self.eps, weight_decay=self.weight_decay)


def total_steps(num_examples: int, batch_size: int, epochs: int) -> int:
    return epochs * math.ceil(num_examples / batch_size)
