"""SGD with classical momentum and stepped learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


@dataclass
class SgdState:
    """Optimizer state: one velocity buffer per parameter name.

    The learning rate decays by ``decay_factor`` after every
    ``decay_period_epochs`` epochs; see :func:`scheduled_lr`.
    """

    learning_rate: float = 1e-5
    momentum: float = 0.99
    decay_factor: float = 0.1
    decay_period_epochs: int = 25
    velocities: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        # lr == 0 is allowed as the degenerate "frozen" configuration.
        if self.learning_rate < 0:
            raise ValueError("learning_rate must not be negative")


def scheduled_lr(state: SgdState, epoch: int) -> float:
    """Learning rate in effect for a 1-based epoch index."""
    steps = (epoch - 1) // state.decay_period_epochs
    return state.learning_rate * state.decay_factor ** steps


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
             state: SgdState, lr: float | None = None) -> None:
    """Classical momentum update, in place: v <- mu*v + g; p <- p - lr*v."""
    if lr is None:
        lr = state.learning_rate
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for '{name}'")
        v = state.velocities.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v + g.astype(p.dtype, copy=False)
        state.velocities[name] = v
        p.data = p.data - lr * v
