"""Optimizer steppers for server-side training (diffusion model, autoencoder).

Client training uses plain SGD (see clients.local_update); these adaptive
steppers exist because denoiser training under bare SGD is impractically
slow.
"""

from __future__ import annotations

import numpy as np


class Sgd:
    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self._vel = None

    def update(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        if self.momentum == 0.0:
            return params - np.asarray(self.lr, dtype=params.dtype) * grads
        if self._vel is None:
            self._vel = np.zeros_like(params)
        self._vel = self.momentum * self._vel + grads
        return params - np.asarray(self.lr, dtype=params.dtype) * self._vel


class Adam:
    def __init__(self, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = None
        self._v = None
        self._t = 0

    def update(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        if self._m is None:
            self._m = np.zeros_like(params)
            self._v = np.zeros_like(params)
        self._t += 1
        self._m = self.beta1 * self._m + (1.0 - self.beta1) * grads
        self._v = self.beta2 * self._v + (1.0 - self.beta2) * grads * grads
        mhat = self._m / (1.0 - self.beta1 ** self._t)
        vhat = self._v / (1.0 - self.beta2 ** self._t)
        step = self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return (params - step).astype(params.dtype, copy=False)


def make_optimizer(kind: str, lr: float, momentum: float = 0.9):
    if kind == "adam":
        return Adam(lr=lr)
    if kind == "sgd":
        return Sgd(lr=lr, momentum=momentum)
    raise ValueError(f"unknown optimizer {kind!r}")
