"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .tensor import Tensor


def cosine_lr(t: int | float, total: int, lr_max: float, lr_min: float) -> float:
    """lr(t) = lr_min + (lr_max - lr_min) * (1 + cos(pi t / total)) / 2."""
    if total <= 0:
        raise ValueError("total steps must be positive")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


@dataclass
class OptimizerState:
    """Per-run optimizer bookkeeping: schedule bounds, moments, step count."""

    lr_max: float
    lr_min: float
    total_steps: int
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    moments1: dict = field(default_factory=dict)
    moments2: dict = field(default_factory=dict)

    def current_lr(self) -> float:
        return cosine_lr(self.step_count, self.total_steps, self.lr_max, self.lr_min)


class AdamW:
    """Applies one decoupled-weight-decay Adam step per call, over a fixed
    name -> Tensor parameter mapping."""

    def __init__(self, params: dict[str, Tensor], lr_max: float, lr_min: float,
                 total_steps: int, weight_decay: float = 0.01,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = OptimizerState(lr_max, lr_min, total_steps, weight_decay,
                                    beta1, beta2, eps)
        for name, p in params.items():
            self.state.moments1[name] = np.zeros(p.data.size)
            self.state.moments2[name] = np.zeros(p.data.size)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        st = self.state
        if st.step_count >= st.total_steps:
            raise RuntimeError("optimizer stepped past its configured horizon")
        lr = st.current_lr()
        st.step_count += 1
        t = st.step_count
        c1 = 1.0 - st.beta1 ** t
        c2 = 1.0 - st.beta2 ** t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            flat = p.data.reshape(-1)
            g = np.ascontiguousarray(p.grad.reshape(-1))
            kernels.adamw_step(flat, g, st.moments1[name], st.moments2[name],
                               lr, st.beta1, st.beta2, st.eps, st.weight_decay,
                               c1, c2)
