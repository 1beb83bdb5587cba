"""Adam with linear warmup and micro-batch gradient accumulation."""

from __future__ import annotations

import math
from typing import List

import numpy as np

from .errors import NumericError
from .tensor import Parameter


class Adam:
    """Bias-corrected Adam over a fixed parameter list.

    Gradients accumulate across `accum_steps` micro-batches (backward adds
    into `.grad`); the update divides by the micro-batch count, so the
    result matches one large batch. The learning rate ramps linearly over
    `warmup` optimizer steps and then stays flat, or decays as
    sqrt(warmup/t) when `decay` is "inverse_sqrt".
    """

    def __init__(self, params: List[Parameter], lr: float = 1e-5,
                 beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-8,
                 warmup: int = 2000, decay: str = "none", accum_steps: int = 4):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.warmup = max(1, warmup)
        self.decay = decay
        self.accum_steps = max(1, accum_steps)
        self.step_count = 0
        self.micro_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def learning_rate(self, step: int) -> float:
        if self.decay == "inverse_sqrt" and step > self.warmup:
            return self.lr * math.sqrt(self.warmup / step)
        return self.lr * min(1.0, step / self.warmup)

    def micro_step(self) -> bool:
        """Count one backward pass; update parameters when the window fills.

        Returns True when an optimizer step was applied.
        """
        self.micro_count += 1
        if self.micro_count < self.accum_steps:
            return False
        self.apply_update()
        return True

    def apply_update(self) -> None:
        self.step_count += 1
        lr_t = self.learning_rate(self.step_count)
        scale = 1.0 / max(1, self.micro_count)
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for i, p in enumerate(self.params):
            grad = (p.grad if p.grad is not None else np.zeros_like(p.data)) * scale
            if not np.isfinite(grad).all():
                raise NumericError(
                    f"non-finite gradient in parameter {p.name or i}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad * grad
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data = p.data - lr_t * m_hat / (np.sqrt(v_hat) + self.eps)
        self.zero_grad()

    def zero_grad(self) -> None:
        self.micro_count = 0
        for p in self.params:
            p.zero_grad()

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "micro_count": self.micro_count,
            "m": [m.copy() for m in self.m],
            "v": [v.copy() for v in self.v],
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        self.micro_count = int(state["micro_count"])
        self.m = [np.asarray(m).copy() for m in state["m"]]
        self.v = [np.asarray(v).copy() for v in state["v"]]
