"""Rectified Adam and a reduce-on-plateau learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class RAdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "RAdamState":
        return cls(np.zeros_like(params, dtype=np.float64), np.zeros_like(params, dtype=np.float64), 0)


def radam_step(state: RAdamState, params: np.ndarray, grads: np.ndarray, lr: float,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> tuple[np.ndarray, RAdamState]:
    """One RAdam update. Returns new params (same dtype) and the advanced state.

    While the length of the approximated simple moving average rho_t is at
    most 4 the variance estimate is not trusted and the update is plain
    bias-corrected momentum.
    """
    g = np.asarray(grads, dtype=np.float64)
    if not np.isfinite(g).all():
        raise FloatingPointError("non-finite gradient; step rejected")
    b1, b2 = betas
    t = state.step + 1
    m = b1 * state.m + (1 - b1) * g
    v = b2 * state.v + (1 - b2) * g * g
    m_hat = m / (1 - b1 ** t)
    rho_inf = 2.0 / (1 - b2) - 1
    rho_t = rho_inf - 2 * t * b2 ** t / (1 - b2 ** t)
    if rho_t > 4:
        v_hat = np.sqrt(v / (1 - b2 ** t))
        r = math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
        update = lr * r * m_hat / (v_hat + eps)
    else:
        update = lr * m_hat
    new = (params.astype(np.float64) - update).astype(params.dtype)
    return new, RAdamState(m, v, t)


class ReduceLROnPlateau:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs
    without a relative improvement of ``threshold`` in the monitored loss."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 20, threshold: float = 1e-4,
                 min_lr: float = 0.0):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.min_lr = min_lr
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, value: float) -> float:
        if self.best == math.inf or value < self.best - abs(self.best) * self.threshold:
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs > self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr
