"""AdamW with decoupled weight decay, plus the warmup/decay schedule.

Moment buffers are allocated only for trainable parameters, so the
optimizer's float footprint is exactly twice the number of trainable
entries.  Parameters with a registered sparsity mask are re-masked after
every step, keeping pruned coordinates at exactly zero throughout
training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, List

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Parameter

__all__ = ["AdamW", "LrSchedule", "lr_at"]


class AdamW:
    def __init__(
        self,
        params: Iterable[Parameter],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params: List[Parameter] = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise ContractError("optimizer state is allocated only for trainable parameters")
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def state_float_count(self) -> int:
        """Total floats held in moment buffers (2x trainable entries)."""
        return sum(m.size + v.size for m, v in zip(self.m, self.v))

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float):
        """One AdamW update at learning rate ``lr``, then mask enforcement."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                raise ContractError("trainable parameter has no gradient; run backward first")
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay != 0.0:
                update = update + self.weight_decay * p.data
            p.data -= np.asarray(lr * update, dtype=p.data.dtype)
            if p.mask is not None:
                p.data *= p.mask


@dataclass
class LrSchedule:
    """Linear warmup to ``peak_lr`` followed by linear decay to zero."""

    peak_lr: float
    total_iters: int
    warmup_iters: int = field(default=0)

    def __post_init__(self):
        if self.warmup_iters == 0:
            self.warmup_iters = math.ceil(0.10 * self.total_iters)
        if not (0 < self.warmup_iters < self.total_iters):
            raise ConfigError(
                f"warmup_iters must satisfy 0 < {self.warmup_iters} < total_iters={self.total_iters}"
            )


def lr_at(schedule: LrSchedule, it: int) -> float:
    """Learning rate at iteration ``it`` (0 <= it <= total_iters)."""
    if not 0 <= it <= schedule.total_iters:
        raise ContractError(f"iteration {it} outside [0, {schedule.total_iters}]")
    if it <= schedule.warmup_iters:
        return schedule.peak_lr * it / schedule.warmup_iters
    span = schedule.total_iters - schedule.warmup_iters
    return schedule.peak_lr * (1.0 - (it - schedule.warmup_iters) / span)
