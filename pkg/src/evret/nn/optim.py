"""Gradient-descent updates over a ParameterSet."""

from __future__ import annotations

import numpy as np

from evret.errors import ArgumentError
from evret.nn.params import ParameterSet


class Sgd:
    """Plain stepwise descent with a fixed learning rate."""

    def __init__(self, params: ParameterSet, lr: float):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for _, t in self.params.items():
            if t.grad is not None:
                t.data -= self.lr * t.grad


class Adam:
    def __init__(
        self,
        params: ParameterSet,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._t = 0
        self._m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self._v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self) -> None:
        self._t += 1
        b1c = 1.0 - self.beta1**self._t
        b2c = 1.0 - self.beta2**self._t
        for name, t in self.params.items():
            if t.grad is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * t.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * t.grad * t.grad
            t.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def make_optimizer(name: str, params: ParameterSet, lr: float):
    if name == "sgd":
        return Sgd(params, lr)
    if name == "adam":
        return Adam(params, lr)
    raise ArgumentError(f"unknown optimizer {name!r}")
