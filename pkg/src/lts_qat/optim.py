"""SGD with momentum and weight decay that honors freeze masks."""
# pylint: disable=W1203
import logging
from typing import Iterable

import numpy as np
from pydantic import BaseModel, Field

from lts_qat.common import ConfigError
from lts_qat.layers import Parameter

logger = logging.getLogger("lts-qat.optim")


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.9,
             weight_decay: float = 1e-4) -> None:
    """v <- momentum * v + g + wd * w; w <- w - lr * v.

    Frozen positions receive no update of any kind: their velocity is held
    at zero and their value is never written. Bound parameters are clamped
    to u >= l + eps afterwards.
    """
    if lr < 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    for p in params:
        dtype = p.value.dtype.type
        step = p.grad + dtype(weight_decay) * p.value
        p.velocity *= dtype(momentum)
        p.velocity += step
        if p.frozen_mask is None:
            p.value -= dtype(lr) * p.velocity
        else:
            p.velocity[p.frozen_mask] = 0
            np.subtract(p.value, dtype(lr) * p.velocity, out=p.value,
                        where=~p.frozen_mask)
        p.clamp()


class StepLR(BaseModel):
    """Multiplicative decay at fixed epoch boundaries."""
    base_lr: float = Field(..., ge=0)
    decay_epochs: list[int] = Field(default_factory=list)
    factor: float = Field(0.1, gt=0)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch."""
        drops = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.base_lr * self.factor ** drops


class SGD:
    """Stateful wrapper binding parameters to hyperparameters."""

    def __init__(self, params: list[Parameter], schedule: StepLR,
                 momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = params
        self.schedule = schedule
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr = schedule.base_lr

    def set_epoch(self, epoch: int) -> float:
        """Apply the step schedule for ``epoch``."""
        lr = self.schedule.lr_at(epoch)
        if lr != self.lr:
            logger.info(f"epoch {epoch}: learning rate {self.lr:g} -> {lr:g}")
        self.lr = lr
        return lr

    def step(self) -> None:
        """One update of every parameter."""
        sgd_step(self.params, self.lr, self.momentum, self.weight_decay)
