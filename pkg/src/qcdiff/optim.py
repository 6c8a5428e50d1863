"""Adaptive-moment optimizer with decoupled weight decay (AdamW)."""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ParameterError
from .tensor import Tensor


class AdamW:
    """Bias-corrected Adam update plus decoupled weight decay.

    `params` is a name -> Tensor mapping; the name is used in error
    messages and to key the per-parameter moment state.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 1e-2,
        grad_clip_norm: float | None = None,
    ):
        if lr <= 0:
            raise ParameterError(f"learning rate must be positive, got {lr}")
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ParameterError(f"betas must lie in (0,1), got {beta1}, {beta2}")
        if weight_decay < 0:
            raise ParameterError(f"weight decay must be >= 0, got {weight_decay}")
        if grad_clip_norm is not None and grad_clip_norm <= 0:
            raise ParameterError(f"grad clip norm must be positive, got {grad_clip_norm}")
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip_norm = grad_clip_norm
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter '{name}' has no gradient")
        self.step_count += 1
        scale = 1.0
        if self.grad_clip_norm is not None:
            total = np.sqrt(
                sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in self.params.values())
            )
            if total > self.grad_clip_norm:
                scale = self.grad_clip_norm / total
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad if scale == 1.0 else p.grad * scale
            if self.weight_decay > 0:
                p.data -= (self.lr * self.weight_decay) * p.data
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
