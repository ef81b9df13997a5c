"""Adam with bias correction and a reduce-on-plateau schedule."""

from __future__ import annotations

import numpy as np

from .autodiff import Param
from .errors import TrainingError


def adam_step(value: np.ndarray, grad: np.ndarray, m: np.ndarray,
              v: np.ndarray, t: int, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One update; returns (new_value, m, v).  t is the 1-based step count."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return value - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Standard Adam over a fixed parameter list; lr is mutable."""

    def __init__(self, params: list[Param], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.state = {
            id(p): (np.zeros_like(p.value), np.zeros_like(p.value))
            for p in self.params
        }

    def step(self) -> None:
        self.t += 1
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient for {p.name}")
            m, v = self.state[id(p)]
            new, m, v = adam_step(p.value, p.grad, m, v, self.t, self.lr,
                                  self.beta1, self.beta2, self.eps)
            self.state[id(p)] = (m, v)
            p.value[...] = new

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class PlateauSchedule:
    """Multiply lr by `factor` after `patience` epochs without improvement."""

    def __init__(self, optimizer: Adam, factor: float, patience: int):
        if not 0.0 < factor < 1.0:
            raise ValueError("plateau factor must be in (0, 1)")
        if patience < 1:
            raise ValueError("plateau patience must be >= 1")
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.best = np.inf
        self.bad_epochs = 0

    def update(self, val_loss: float) -> bool:
        """Track one epoch's validation loss; True if the lr was reduced."""
        if val_loss < self.best - 1e-12:
            self.best = val_loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.optimizer.lr *= self.factor
            self.bad_epochs = 0
            return True
        return False
