"""Small optimizers: SGD with momentum for weights, RMSprop and Adam for inputs."""

from __future__ import annotations

from typing import List

import numpy as np

from .tensor import Tensor


class SGD:
    def __init__(self, params: List[Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class RMSprop:
    """RMSprop on a plain array.

    ``rho`` is the decay of the running squared-gradient average:
    ``v <- rho * v + (1 - rho) * g**2``.
    """

    def __init__(self, shape, lr: float, rho: float, eps: float = 1e-8, dtype=np.float64):
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.square_avg = np.zeros(shape, dtype=dtype)

    def step(self, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.square_avg = self.rho * self.square_avg + (1.0 - self.rho) * grad * grad
        return x - self.lr * grad / (np.sqrt(self.square_avg) + self.eps)


class Adam:
    def __init__(self, shape, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return x - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
