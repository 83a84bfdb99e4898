"""AdamW with decoupled weight decay and a step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.01,
    eps: float = 1e-8,
) -> np.ndarray:
    """One AdamW update; mutates ``state`` and returns the new parameter array.

    ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``
    """
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    b1, b2 = betas
    state.t += 1
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1**state.t)
    v_hat = state.v / (1.0 - b2**state.t)
    return param - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * param)


class AdamW:
    """Optimizer over a fixed, ordered list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], cfg: AdamWConfig = AdamWConfig()):
        self.params = list(params)
        self.cfg = cfg
        self.lr = cfg.lr
        self.states = [AdamState(np.zeros_like(p.data), np.zeros_like(p.data)) for p in self.params]

    def step(self) -> None:
        c = self.cfg
        for p, st in zip(self.params, self.states):
            p.data = adamw_step(p.data, p.grad, st, self.lr, (c.beta1, c.beta2), c.weight_decay, c.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def step_lr(base_lr: float, epoch: int, decay_epoch: int, factor: float) -> float:
    """``base_lr`` before ``decay_epoch`` (0-based), ``base_lr * factor`` from then on."""
    return base_lr * factor if epoch >= decay_epoch else base_lr
