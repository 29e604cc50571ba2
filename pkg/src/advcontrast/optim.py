"""SGD with momentum and weight decay, plus the lr schedules used here."""

from __future__ import annotations

import math
from typing import Dict

import numpy as np


class SGD:
    """v = mu*v + (g + wd*p); p -= lr*v. Parameters update in sorted-name order."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, arrays: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float) -> None:
        lr = np.float32(lr)
        mu = np.float32(self.momentum)
        wd = np.float32(self.weight_decay)
        for name in sorted(grads):
            g = grads[name]
            if wd != 0.0:
                g = g + wd * arrays[name]
            v = self.velocity.get(name)
            v = g if v is None else mu * v + g
            self.velocity[name] = v
            arrays[name] = arrays[name] - lr * v


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    """Half-cosine decay from base_lr to 0 over the run."""
    if total_epochs <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def step_lr(base_lr: float, epoch: int, decay_epochs, factor: float) -> float:
    """Multiply by `factor` at each epoch in decay_epochs."""
    lr = base_lr
    for e in decay_epochs:
        if epoch >= e:
            lr *= factor
    return lr
