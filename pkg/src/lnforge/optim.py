"""Hand-rolled Adam (bias-corrected first/second moment) over lists of arrays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during optimization."""


@dataclass
class TrainConfig:
    """Optimizer and loop settings shared by the denoiser and adapter trainers.

    ``lam`` only weights the adapter term in the reported combined loss.
    """

    lr: float = 1e-3
    steps: int = 2000
    batch_size: int = 64
    seed: int = 0
    lam: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("moment coefficients must lie in [0, 1)")

    def adam(self, params: list[np.ndarray]) -> Adam:
        return Adam(params, self.lr, self.beta1, self.beta2)
