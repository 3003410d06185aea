"""SGD with heavy-ball momentum and L2 weight decay, plus step LR schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class MissingGradientError(KeyError):
    pass


@dataclass(frozen=True)
class StepSchedule:
    base_lr: float
    decay_factor: float = 5.0
    step_every: int = 50

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if not self.decay_factor > 1:
            raise ValueError(f"decay_factor must be > 1, got {self.decay_factor}")
        if int(self.step_every) != self.step_every or self.step_every < 1:
            raise ValueError(f"step_every must be a positive integer, got {self.step_every}")

    def lr_at(self, epoch: int) -> float:
        return lr_at(self, epoch)


def lr_at(schedule: StepSchedule, epoch: int) -> float:
    """``base_lr / decay_factor ** floor(epoch / step_every)``."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return schedule.base_lr / schedule.decay_factor ** (epoch // schedule.step_every)


@dataclass
class SGD:
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")

    def reset(self) -> None:
        self.velocity = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
        """v <- momentum * v + (grad + wd * param);  param <- param - lr * v."""
        missing = [n for n in params if n not in grads]
        if missing:
            raise MissingGradientError(f"no gradient for parameter {missing[0]!r}")
        dead = [n for n in self.velocity if n not in params]
        for n in dead:
            del self.velocity[n]
        for name, p in params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            p.assign(p.data - lr * v)


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], cfg: SGD, lr: float) -> dict[str, Tensor]:
    cfg.step(params, grads, lr)
    return params
