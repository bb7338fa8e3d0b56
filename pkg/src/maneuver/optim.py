"""SGD with momentum, weight decay, and a stepped learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NonFiniteError
from .tensor import Tensor


@dataclass(frozen=True)
class SgdConfig:
    """Optimizer hyperparameters.

    ``lr_schedule`` is a list of ``(epoch, multiplier)`` pairs; every
    multiplier whose epoch boundary is <= the current epoch applies
    (epochs are counted from 0).
    """

    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    lr_schedule: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "lr_schedule",
                           tuple((int(e), float(m)) for e, m in self.lr_schedule))
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be non-negative, got {self.weight_decay}")
        epochs = [e for e, _ in self.lr_schedule]
        if any(later <= earlier for earlier, later in zip(epochs, epochs[1:])):
            raise ConfigError(f"schedule epochs must be strictly increasing: {epochs}")

    def lr_at(self, epoch: int) -> float:
        lr = self.learning_rate
        for boundary, mult in self.lr_schedule:
            if boundary <= epoch:
                lr *= mult
        return lr


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             state: dict[str, np.ndarray], config: SgdConfig, epoch: int
             ) -> dict[str, np.ndarray]:
    """One momentum-SGD update, in place.

    v <- momentum*v - lr(epoch)*(grad + weight_decay*param); param <- param + v.
    Velocity buffers are created zero on first use. A non-finite gradient
    aborts the step before any parameter is touched.
    """
    lr = config.lr_at(epoch)
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}; step aborted")
    for name, p in params.items():
        g = grads[name]
        v = state.get(name)
        if v is None:
            v = state[name] = np.zeros_like(p)
        v *= config.momentum
        v -= lr * (g + config.weight_decay * p)
        p += v
    return params


class Sgd:
    """Stateful wrapper applying :func:`sgd_step` to a model's parameters."""

    def __init__(self, parameters: list[tuple[str, Tensor]], config: SgdConfig):
        self.parameters = parameters
        self.config = config
        self.state: dict[str, np.ndarray] = {}

    def step(self, epoch: int) -> None:
        params = {name: p.data for name, p in self.parameters}
        grads = {}
        for name, p in self.parameters:
            if p.grad is None:
                raise NonFiniteError(f"parameter {name!r} has no gradient; step aborted")
            grads[name] = p.grad
        sgd_step(params, grads, self.state, self.config, epoch)

    def zero_grad(self) -> None:
        for _, p in self.parameters:
            p.zero_grad()
