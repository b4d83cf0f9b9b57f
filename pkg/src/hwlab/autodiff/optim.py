"""AdamW with decoupled weight decay.

One update, per parameter p with gradient g at step t:

    p <- p * (1 - lr * weight_decay)          (decay, decoupled from g)
    m <- beta1 * m + (1 - beta1) * g
    v <- beta2 * v + (1 - beta2) * g^2
    p <- p - lr * (m / (1 - beta1^t)) / (sqrt(v / (1 - beta2^t)) + eps)

State is kept in the parameter dtype, so float32 training is bitwise
reproducible run-to-run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

__all__ = ["AdamWConfig", "adamw_update", "AdamW"]


@dataclass(frozen=True)
class AdamWConfig:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("eps must be > 0 and weight_decay >= 0")


def adamw_update(
    value: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    config: AdamWConfig,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pure one-parameter update; returns (value', m', v') for step t >= 1."""
    if config.weight_decay:
        value = value * (1.0 - config.lr * config.weight_decay)
    m = config.beta1 * m + (1.0 - config.beta1) * grad
    v = config.beta2 * v + (1.0 - config.beta2) * (grad * grad)
    m_hat = m / (1.0 - config.beta1**t)
    v_hat = v / (1.0 - config.beta2**t)
    value = value - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return value, m, v


class AdamW:
    """Stateful optimizer over named tensors.

    Parameter order is the insertion order of `params`, which fixes the
    update order (irrelevant numerically - updates are independent - but
    kept stable anyway).
    """

    def __init__(self, params: dict[str, Tensor], config: AdamWConfig):
        if not params:
            raise ValueError("no parameters to optimize")
        for name, p in params.items():
            if not p.requires_grad:
                raise ValueError(f"parameter {name!r} has requires_grad=False")
        self.params = dict(params)
        self.config = config
        self.t = 0
        self._m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.values) for k, p in params.items()}

    def step(self):
        """Apply one update from the accumulated gradients."""
        self.t += 1
        for name, p in self.params.items():
            new, self._m[name], self._v[name] = adamw_update(
                p.values, p.grad, self._m[name], self._v[name], self.t,
                self.config,
            )
            p.values[...] = new

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()
